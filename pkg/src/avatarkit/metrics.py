"""Emotion-reconstruction metric: Earth Mover's Distance between per-frame
valence and arousal distributions of generated and real videos.

Frames are pooled per (subject, emotion) group on each side, one EMD is
computed per group and axis, and the group values are averaged.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np


class MetricError(ValueError):
    pass


def emd_1d(a, b) -> float:
    """Exact 1-D optimal transport cost between two unit-mass empirical distributions.

    Computed as the integral of ``|CDF_a - CDF_b|`` over the merged support,
    which handles unequal sample counts.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise MetricError("emd_1d needs non-empty samples on both sides")
    support = np.concatenate([a, b])
    support.sort(kind="mergesort")
    widths = np.diff(support)
    cdf_a = np.searchsorted(a, support[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, support[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


@dataclass
class VAFrameSeries:
    valence: np.ndarray
    arousal: np.ndarray
    subject: str
    emotion: str

    def __post_init__(self):
        self.valence = np.asarray(self.valence, dtype=np.float64).ravel()
        self.arousal = np.asarray(self.arousal, dtype=np.float64).ravel()
        if self.valence.size == 0 or self.valence.shape != self.arousal.shape:
            raise MetricError("valence/arousal series must be non-empty and equally long")
        for name, x in (("valence", self.valence), ("arousal", self.arousal)):
            if np.any(np.abs(x) > 1.0) or not np.all(np.isfinite(x)):
                raise MetricError(f"{name} values must lie in [-1, 1]")


class EmotionPredictor(Protocol):
    """RGB frame ``(H, W, 3)`` in [0, 1] -> ``(valence, arousal)`` in [-1, 1]^2; deterministic."""

    def __call__(self, frame: np.ndarray) -> tuple[float, float]: ...


class ColorStatPredictor:
    """Deterministic stand-in predictor for tests and synthetic data.

    Valence follows the red-minus-blue balance and arousal the mean
    brightness of the frame, both squashed into [-1, 1].
    """

    def __init__(self, gain: float = 4.0):
        self.gain = gain

    def __call__(self, frame) -> tuple[float, float]:
        f = np.asarray(frame, dtype=np.float64)
        v = np.tanh(self.gain * (f[..., 0].mean() - f[..., 2].mean()))
        a = np.tanh(self.gain * (f.mean() - 0.5))
        return float(v), float(a)


class ConstantPredictor:
    def __init__(self, valence: float, arousal: float):
        self.value = (float(valence), float(arousal))

    def __call__(self, frame) -> tuple[float, float]:
        return self.value


PREDICTORS: dict[str, Callable[[], EmotionPredictor]] = {"color-stats": ColorStatPredictor}


def predict_series(frames: Iterable[np.ndarray], predictor: EmotionPredictor, subject: str,
                   emotion: str) -> VAFrameSeries:
    va = np.array([predictor(f) for f in frames], dtype=np.float64).reshape(-1, 2)
    return VAFrameSeries(va[:, 0], va[:, 1], subject, emotion)


@dataclass
class GroupEMD:
    subject: str
    emotion: str
    v_emd: float
    a_emd: float
    n_gen: int
    n_real: int


@dataclass
class EmotionEMD:
    a_emd: float
    v_emd: float
    groups: list[GroupEMD]


def _pool(series: Sequence[VAFrameSeries]) -> dict[tuple[str, str], tuple[np.ndarray, np.ndarray]]:
    pooled: dict[tuple[str, str], list[VAFrameSeries]] = {}
    for s in series:
        pooled.setdefault((s.subject, s.emotion), []).append(s)
    return {k: (np.concatenate([s.valence for s in v]), np.concatenate([s.arousal for s in v]))
            for k, v in pooled.items()}


def emotion_emd(generated: Sequence[VAFrameSeries], real: Sequence[VAFrameSeries],
                pool: bool = True) -> EmotionEMD:
    """Mean over (subject, emotion) groups of the valence and arousal EMDs.

    With ``pool=False`` each generated video is compared with the pooled real
    frames of its group and the per-video values are averaged within the group.
    """
    gen_groups = _pool(generated)
    real_groups = _pool(real)
    missing = sorted(set(gen_groups) ^ set(real_groups))
    if missing:
        side = "real" if missing[0] in gen_groups else "generated"
        raise MetricError(f"group subject={missing[0][0]!r} emotion={missing[0][1]!r} has no {side} videos")
    if not gen_groups:
        raise MetricError("no videos to compare")
    rows = []
    for key in sorted(gen_groups):
        rv, ra = real_groups[key]
        if pool:
            gv, ga = gen_groups[key]
            v, a = emd_1d(gv, rv), emd_1d(ga, ra)
            n_gen = gv.size
        else:
            vids = [s for s in generated if (s.subject, s.emotion) == key]
            v = float(np.mean([emd_1d(s.valence, rv) for s in vids]))
            a = float(np.mean([emd_1d(s.arousal, ra) for s in vids]))
            n_gen = sum(s.valence.size for s in vids)
        rows.append(GroupEMD(key[0], key[1], v, a, n_gen, rv.size))
    return EmotionEMD(float(np.mean([r.a_emd for r in rows])), float(np.mean([r.v_emd for r in rows])), rows)


def write_emd_report(result: EmotionEMD, csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "emotion", "v_emd", "a_emd", "n_gen_frames", "n_real_frames"])
        for g in result.groups:
            w.writerow([g.subject, g.emotion, f"{g.v_emd:.6f}", f"{g.a_emd:.6f}", g.n_gen, g.n_real])
    if json_path is not None:
        Path(json_path).write_text(json.dumps({"A-EMD": result.a_emd, "V-EMD": result.v_emd,
                                               "groups": len(result.groups)}, indent=2) + "\n")


def series_from_tree(root, predictor: EmotionPredictor, reader: Callable[[Path], Iterable[np.ndarray]]
                     ) -> list[VAFrameSeries]:
    """Walk ``root/subject/emotion/video`` and predict every frame of every video."""
    root = Path(root)
    out = []
    for subj in sorted(p for p in root.iterdir() if p.is_dir()):
        for emo in sorted(p for p in subj.iterdir() if p.is_dir()):
            for vid in sorted(p for p in emo.iterdir() if p.is_dir()):
                out.append(predict_series(reader(vid), predictor, subj.name, emo.name))
    if not out:
        raise MetricError(f"no subject/emotion/video folders under {root}")
    return out


def summarize(results: Mapping[str, EmotionEMD]) -> dict[str, dict[str, float]]:
    return {k: {"A-EMD": v.a_emd, "V-EMD": v.v_emd} for k, v in results.items()}
