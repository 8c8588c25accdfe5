"""Procedural datasets with known ground truth.

Audio is built from "phoneme" segments (a class id plus a loudness); the
face tracks, phoneme probabilities and MFCCs are all derived from the same
segment list so every mapping is known exactly.  Mouth opening follows the
loudness envelope, the emotion label adds constant expression offsets, and
pose sways on a scripted path independent of the audio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio2expression import pack_pi_var
from .audio_features import (EmotionLabel, EmotionTable, MfccConfig, encode_emotion, mfcc_for_video)
from .face_model import (BlendshapeModel, axis_angle_to_matrix, default_scene, landmark_uv, make_head_model,
                         rasterize, render_textured, texture_from_coeffs)

N_RAW_CLASSES = 64
MOUTH_PALETTE = np.array([[0.95, 0.85, 0.2], [0.15, 0.75, 0.3], [0.2, 0.35, 0.95], [0.9, 0.2, 0.85]])

# expression offsets per emotion at intensity 1 (mouth_open, smile, pucker, brow_raise, brow_furrow, cheek_puff)
EMOTION_STYLE = {
    "happy": (0.0, 0.9, 0.0, 0.2, 0.0, 0.3),
    "sad": (0.0, -0.5, 0.0, 0.0, 0.7, 0.0),
    "angry": (0.0, -0.3, 0.0, -0.3, 0.9, 0.0),
    "surprised": (0.3, 0.0, 0.0, 0.9, 0.0, 0.0),
    "fear": (0.2, -0.2, 0.3, 0.6, 0.3, 0.0),
    "disgusted": (0.0, -0.4, 0.5, 0.0, 0.5, 0.2),
    "contempt": (0.0, 0.4, 0.0, 0.0, 0.2, -0.3),
}


@dataclass
class SyntheticScenario:
    seed: int = 0
    n_clips: int = 4
    frames_per_clip: int = 60
    resolution: int = 64
    audio_rate: int = 24000
    fps: float = 30.0
    emotions: tuple[tuple[str, float], ...] = (("neutral", 0.0), ("happy", 1.0), ("sad", 0.5), ("angry", 1.0))
    one_to_many: bool = False
    blinks: bool = True
    pose_motion: bool = True
    render: bool = True
    texture_audio: bool = False
    n_active_classes: int = 0  # > 0: only the most frequent classes are spoken
    mfcc: MfccConfig = field(default_factory=MfccConfig)


@dataclass
class SyntheticClip:
    name: str
    waveform: np.ndarray
    rate: int
    mfcc: np.ndarray  # (k*n, n_mfcc)
    phonemes: np.ndarray  # raw (T50, N_RAW_CLASSES) at 50 fps
    label: EmotionLabel
    pi_var: list[list[dict]]  # one track per valid target; 2 for one-to-many
    frame_class: np.ndarray  # phoneme class at each video frame
    frames: list[np.ndarray] | None = None  # per target: (n, H, W, 3) float in [0, 1]
    alphas: list[np.ndarray] | None = None

    @property
    def n_frames(self) -> int:
        return len(self.pi_var[0])

    def targets(self, n_joints: int, n_expr: int) -> list[np.ndarray]:
        return [np.stack([pack_pi_var(p, n_joints, n_expr) for p in track]) for track in self.pi_var]


@dataclass
class SyntheticDataset:
    scenario: SyntheticScenario
    model: BlendshapeModel
    pi_fix: dict[str, np.ndarray]
    background: np.ndarray
    clips: list[SyntheticClip]


def _class_table(rng):
    f1 = rng.uniform(250.0, 900.0, N_RAW_CLASSES)
    f2 = rng.uniform(1000.0, 3200.0, N_RAW_CLASSES)
    freq = 1.0 / (np.arange(N_RAW_CLASSES) + 3.0) ** 1.3
    freq[45:] *= 0.02  # rare tail beyond the 50 retained classes
    return f1, f2, freq / freq.sum()


def _segments(rng, duration, class_p):
    segs, t = [], 0.0
    while t < duration:
        d = rng.uniform(0.1, 0.25)
        c = int(rng.choice(N_RAW_CLASSES, p=class_p))
        amp = 0.05 if rng.random() < 0.12 else rng.uniform(0.2, 1.0)
        segs.append((t, t + d, c, amp))
        t += d
    return segs


def _at(segs, times):
    starts = np.array([s[0] for s in segs])
    idx = np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(segs) - 1)
    return idx


def _smooth(x, coeff):
    y = np.empty_like(x)
    acc = x[0]
    for i, v in enumerate(x):
        acc = coeff * acc + (1 - coeff) * v
        y[i] = acc
    return y


def background_image(res: int, rng) -> np.ndarray:
    c = (np.arange(res) + 0.5) / res
    xx, yy = np.meshgrid(c, c)
    phase = rng.uniform(0, 2 * math.pi, 3)
    return np.stack([0.25 + 0.15 * np.sin(2 * math.pi * xx + phase[0]),
                     0.3 + 0.15 * np.sin(2 * math.pi * yy + phase[1]),
                     0.45 + 0.1 * np.cos(2 * math.pi * (xx + yy) + phase[2])], -1)


def mouth_patch(res: int) -> np.ndarray:
    """Soft UV-space weight of the audio-coloured mouth region, ``(res, res)``."""
    c = (np.arange(res) + 0.5) / res
    uu, vv = np.meshgrid(c, c[::-1])
    m = landmark_uv("mouth")
    return np.exp(-((uu - m[0]) / 0.09) ** 2 - ((vv - m[1]) / 0.04) ** 2)


def render_frame(model, pi_fix, pi_var, res, background, texture=None):
    scene = default_scene(model, res)
    scene = scene.replace(tex=torch.as_tensor(pi_fix["tex"]), light=torch.as_tensor(pi_fix["light"]),
                          K=torch.as_tensor(pi_fix["K"]), shape=torch.as_tensor(pi_fix["shape"]),
                          joints=torch.as_tensor(pi_var["joints"]), expr=torch.as_tensor(pi_var["expr"]),
                          R=torch.as_tensor(pi_var["R"]), t=torch.as_tensor(pi_var["t"]))
    with torch.no_grad():
        buf = rasterize(model, scene, res)
        tex = texture if texture is not None else texture_from_coeffs(model, scene.tex)
        img = render_textured(buf, torch.as_tensor(tex), scene.light).numpy()
    a = buf.alpha.numpy()
    return np.clip(img + (1 - a[..., None]) * background, 0.0, 1.0), a


def synth_dataset(scenario: SyntheticScenario, model: BlendshapeModel | None = None,
                  table: EmotionTable | None = None) -> SyntheticDataset:
    """Build the dataset; identical scenarios give bitwise-identical output."""
    model = model or make_head_model()
    table = table or EmotionTable.default()
    rng = np.random.default_rng(scenario.seed)
    f1, f2, class_p = _class_table(np.random.default_rng(12345))
    if scenario.n_active_classes > 0:
        class_p = np.where(np.arange(N_RAW_CLASSES) < scenario.n_active_classes, class_p, 0.0)
        class_p /= class_p.sum()

    res = scenario.resolution
    scene = default_scene(model, res)
    pi_fix = {"tex": rng.uniform(-1.0, 1.0, model.n_tex), "shape": rng.uniform(-0.5, 0.5, model.n_shape),
              "light": scene.light.numpy().copy(), "K": scene.K.numpy().copy()}
    pi_fix["light"][:, 3] = rng.uniform(-0.15, 0.15) / 0.4886
    background = background_image(res, rng)
    base_tex = texture_from_coeffs(model, pi_fix["tex"]).numpy()
    patch = mouth_patch(base_tex.shape[0])[..., None]

    n = scenario.frames_per_clip
    fps = scenario.fps
    rate = scenario.audio_rate
    clips = []
    for ci in range(scenario.n_clips):
        crng = np.random.default_rng([scenario.seed, ci])
        duration = n / fps
        segs = _segments(crng, duration + 0.3, class_p)
        n_samples = int(round(duration * rate))
        ts = np.arange(n_samples) / rate
        si = _at(segs, ts)
        cls = np.array([segs[i][2] for i in si])
        amp = np.array([segs[i][3] for i in si])
        amp = _smooth(amp, math.exp(-1.0 / (0.01 * rate)))
        wave = amp * (0.6 * np.sin(2 * math.pi * f1[cls] * ts) + 0.3 * np.sin(2 * math.pi * f2[cls] * ts))
        wave = 0.8 * wave + 0.003 * crng.standard_normal(n_samples)

        t50 = np.arange(int(round(duration * 50))) / 50.0
        c50 = np.array([segs[i][2] for i in _at(segs, t50)])
        probs = np.full((t50.size, N_RAW_CLASSES), 0.0)
        probs[np.arange(t50.size), c50] = 0.9
        probs[np.arange(t50.size), (c50 + 1) % N_RAW_CLASSES] += 0.06
        probs[np.arange(t50.size), (c50 + 7) % N_RAW_CLASSES] += 0.03

        tv = (np.arange(n) + 0.5) / fps
        frame_class = np.array([segs[i][2] for i in _at(segs, tv)])
        env = np.array([segs[i][3] for i in _at(segs, tv)])
        fast = _smooth(env, 0.6)
        slow = _smooth(env, 0.9)

        emo, inten = scenario.emotions[ci % len(scenario.emotions)]
        label = encode_emotion(emo, inten, table)
        style = np.zeros(model.n_expr)
        if emo in EMOTION_STYLE:
            style[:6] = inten * np.asarray(EMOTION_STYLE[emo])

        dyn = np.zeros((n, model.n_expr))
        dyn[:, 0] = 1.4 * fast - 0.4
        dyn[:, 1] = 0.3 * (fast - slow)
        dyn[:, 2] = 0.9 * (fast - slow)
        dyn[:, 3] = 0.3 * (slow - 0.5)
        dyn[:, 4] = 0.2 * (0.5 - fast)
        dyn[:, 5] = 0.5 * (slow - 0.5)
        jaw = 0.08 * (fast - 0.4)
        if scenario.blinks:
            blink = np.zeros(n)
            for start in crng.integers(0, n, size=max(1, n // 45)):
                blink[start:start + 4] = (0.6, 1.0, 1.0, 0.5)[:len(blink[start:start + 4])]
            dyn[:, 6] = dyn[:, 7] = blink

        phase = crng.uniform(0, 2 * math.pi, 4)
        k = np.arange(n) / fps
        variants = (1.0, -1.0) if scenario.one_to_many else (1.0,)
        tracks = []
        for sign in variants:
            track = []
            for i in range(n):
                joints = np.zeros((model.n_joints, 3))
                joints[-1, 0] = sign * jaw[i]
                if scenario.pose_motion:
                    rvec = np.array([0.04 * math.sin(1.3 * k[i] + phase[0]), 0.08 * math.sin(0.9 * k[i] + phase[1]), 0.0])
                    t = np.array([0.03 * math.sin(0.7 * k[i] + phase[2]), 0.02 * math.sin(1.1 * k[i] + phase[3]), 3.0])
                else:
                    rvec, t = np.zeros(3), np.array([0.0, 0.0, 3.0])
                track.append({"joints": joints, "expr": style + sign * dyn[i], "rvec": rvec,
                              "R": axis_angle_to_matrix(torch.as_tensor(rvec)).numpy(), "t": t})
            tracks.append(track)

        mfcc = mfcc_for_video(wave, rate, n, scenario.mfcc).matrix
        frames = alphas = None
        if scenario.render:
            frames, alphas = [], []
            for track in tracks:
                fr, al = [], []
                for i, p in enumerate(track):
                    tex = base_tex
                    if scenario.texture_audio:
                        tex = base_tex * (1 - patch) + patch * MOUTH_PALETTE[frame_class[i] % 4]
                    img, a = render_frame(model, pi_fix, p, res, background, tex)
                    fr.append(img)
                    al.append(a)
                frames.append(np.stack(fr))
                alphas.append(np.stack(al))
        clips.append(SyntheticClip(f"clip_{ci:03d}", wave, rate, mfcc, probs, label, tracks,
                                   frame_class, frames, alphas))
    return SyntheticDataset(scenario, model, pi_fix, background, clips)


def a2e_samples(ds: SyntheticDataset):
    """One training sample per (clip, valid target)."""
    from .audio2expression import A2ESample

    m = ds.model
    out = []
    for clip in ds.clips:
        for v, target in enumerate(clip.targets(m.n_joints, m.n_expr)):
            out.append(A2ESample(clip.mfcc, clip.label.vector, target, f"{clip.name}_v{v}"))
    return out
