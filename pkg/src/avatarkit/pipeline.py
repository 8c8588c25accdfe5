"""Configuration, dataset folders, cropping, end-to-end generation and run manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import platform
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import __version__
from .audio2expression import A2EConfig, A2EModel, unpack_pi_var
from .audio_features import (EmotionTable, MfccConfig, PhonemeProbStream, encode_emotion, broadcast_label,
                             mfcc_for_video, n_video_frames)
from .checkpoint import file_hash
from .neural_renderer import NeuralRenderer, RendererClip, RendererConfig, render_clip, rasterize_track
from .tracker import TrackerConfig, TrackingPriors

log = logging.getLogger(__name__)


class PipelineError(ValueError):
    pass


@dataclass
class PipelineConfig:
    """Every tunable of the command-line pipeline; one flat key per field."""

    seed: int = 0
    fps: float = 30.0
    resolution: int = 64
    crop_size: int = 256
    crop_padding: float = 0.1
    model: str = ""
    emotions: str = ""
    # tracker
    track_lr: float = 1e-2
    track_fixed_iters: int = 200
    track_frame_iters: int = 50
    track_first_frame_iters: int = 200
    track_fixed_frames: int = 4
    track_refine_above: float = 1e-3
    track_refine_iters: int = 150
    track_tol: float = 1e-5
    prior_shape: float = 1e-3
    prior_tex: float = 1e-3
    prior_expr: float = 1e-4
    prior_joints: float = 1e-4
    # audio features
    mfcc_window_s: float = 0.030
    n_mels: int = 40
    n_mfcc: int = 28
    mfcc_per_frame: int = 4
    # audio-to-expression
    a2e_latent: int = 128
    a2e_lr: float = 1e-4
    a2e_disc_lr: float = -1.0  # negative: same as a2e_lr
    a2e_epochs: int = 10
    a2e_batch: int = 8
    a2e_chunk: int = 64
    lambda_gan_a2e: float = 0.02
    lambda_vel: float = 100.0
    a2e_predict_pose: bool = True
    pose_from_reference: bool = True
    # renderer
    W: int = 8
    W_R: int = 2
    N_a: int = 32
    omega0: float = 30.0
    dilation_at_256: float = 8.0
    texture_hidden: int = 64
    texture_layers: int = 3
    unet_base: int = 16
    unet_depth: int = 3
    disc_base: int = 16
    lambda_l1: float = 1.0
    lambda_vgg: float = 1.0
    lambda_gan_render: float = 0.01
    render_lr: float = 1e-4
    render_epochs: int = 5
    render_batch: int = 4
    audio_texture: bool = True
    # evaluation
    predictor: str = "color-stats"
    pool_frames: bool = True
    # synthetic data
    synth_clips: int = 4
    synth_frames: int = 60
    synth_one_to_many: bool = False
    synth_texture_audio: bool = True
    synth_blinks: bool = True
    synth_pose_motion: bool = True
    synth_audio_rate: int = 24000

    # ---------------------------------------------------------------- parsing

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}

    @classmethod
    def coerce(cls, key: str, value):
        types = cls.field_types()
        if key not in types:
            raise PipelineError(f"unknown config key {key!r}")
        typ = types[key]
        if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
            return value
        text = str(value).strip()
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise PipelineError(f"{key}: expected a boolean, got {text!r}")
        try:
            return typ(text)
        except ValueError as exc:
            raise PipelineError(f"{key}: cannot parse {text!r} as {typ.__name__}") from exc

    @classmethod
    def parse(cls, text: str) -> dict:
        """``key = value`` lines; ``#`` starts a comment."""
        out = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise PipelineError(f"config line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = cls.coerce(key, value)
        return out

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "PipelineConfig":
        values = cls.parse(Path(path).read_text()) if path else {}
        for k, v in (overrides or {}).items():
            values[k] = cls.coerce(k, v)
        return cls(**values)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)

    # ---------------------------------------------------------- module configs

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(lr=self.track_lr, fixed_iters=self.track_fixed_iters, frame_iters=self.track_frame_iters,
                             first_frame_iters=self.track_first_frame_iters, photometric_tol=self.track_tol,
                             n_fixed_frames=self.track_fixed_frames, refine_above=self.track_refine_above,
                             refine_iters=self.track_refine_iters)

    def tracking_priors(self) -> TrackingPriors:
        return TrackingPriors(weights={"shape": self.prior_shape, "tex": self.prior_tex,
                                       "expr": self.prior_expr, "joints": self.prior_joints})

    def mfcc_config(self) -> MfccConfig:
        return MfccConfig(window_s=self.mfcc_window_s, n_mels=self.n_mels, n_mfcc=self.n_mfcc,
                          frames_per_video_frame=self.mfcc_per_frame, video_fps=self.fps)

    def a2e_config(self, n_joints: int, n_expr: int, label_dim: int) -> A2EConfig:
        return A2EConfig(n_mfcc=self.n_mfcc, frames_per_video_frame=self.mfcc_per_frame, label_dim=label_dim,
                         n_joints=n_joints, n_expr=n_expr, latent=self.a2e_latent, lambda_gan=self.lambda_gan_a2e,
                         lambda_vel=self.lambda_vel, lr=self.a2e_lr,
                         disc_lr=self.a2e_disc_lr if self.a2e_disc_lr > 0 else None, epochs=self.a2e_epochs,
                         batch_size=self.a2e_batch, chunk=self.a2e_chunk, predict_pose=self.a2e_predict_pose)

    def renderer_config(self) -> RendererConfig:
        return RendererConfig(W=self.W, W_R=self.W_R, N_a=self.N_a, omega0=self.omega0,
                              dilation_at_256=self.dilation_at_256, texture_hidden=self.texture_hidden,
                              texture_layers=self.texture_layers, unet_base=self.unet_base,
                              unet_depth=self.unet_depth, disc_base=self.disc_base, lambda_l1=self.lambda_l1,
                              lambda_perc=self.lambda_vgg, lambda_gan=self.lambda_gan_render, lr=self.render_lr,
                              epochs=self.render_epochs, batch_size=self.render_batch,
                              audio_texture=self.audio_texture)


# --------------------------------------------------------------------------
# Frames and cropping
# --------------------------------------------------------------------------


def read_frames(folder) -> np.ndarray:
    """All ``*.png`` in ``folder`` (sorted by name) as float ``(n, H, W, 3)`` in [0, 1]."""
    paths = sorted(Path(folder).glob("*.png"))
    if not paths:
        raise PipelineError(f"no PNG frames in {folder}")
    return np.stack([np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0 for p in paths])


def write_frames(folder, frames) -> list[Path]:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    out = []
    for i, f in enumerate(frames):
        p = folder / f"{i:05d}.png"
        Image.fromarray(np.round(np.clip(f, 0, 1) * 255).astype(np.uint8)).save(p)
        out.append(p)
    return out


@dataclass
class CropInfo:
    top: int
    left: int
    side: int
    size: int
    clamped: bool


def crop_box(boxes, image_hw: tuple[int, int], padding: float = 0.0) -> CropInfo:
    """Smallest square covering the union of padded ``(x0, y0, x1, y1)`` boxes.

    ``padding`` grows each box by that fraction of its larger side.  A square
    that sticks out of the image is shifted inside (and shrunk if it must be).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.size == 0:
        raise PipelineError("crop needs at least one face box")
    ext = np.maximum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]) * padding
    x0 = float((boxes[:, 0] - ext).min())
    y0 = float((boxes[:, 1] - ext).min())
    x1 = float((boxes[:, 2] + ext).max())
    y1 = float((boxes[:, 3] + ext).max())
    side = max(x1 - x0, y1 - y0)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    h, w = image_hw
    side_i = int(math.ceil(side))
    left = int(math.floor(cx - side_i / 2))
    top = int(math.floor(cy - side_i / 2))
    clamped = False
    if side_i > min(h, w):
        side_i, clamped = min(h, w), True
    if left < 0 or top < 0 or left + side_i > w or top + side_i > h:
        clamped = True
        left = min(max(left, 0), w - side_i)
        top = min(max(top, 0), h - side_i)
    if clamped:
        log.warning("face boxes extend outside the %dx%d image; crop clamped", w, h)
    return CropInfo(top, left, side_i, side_i, clamped)


def crop_square(frames, boxes, padding: float = 0.0, size: int = 256) -> tuple[np.ndarray, CropInfo]:
    """Apply one square crop (covering every frame's face box) to the whole video and resize."""
    frames = np.asarray(frames)
    info = crop_box(boxes, frames.shape[1:3], padding)
    info = dataclasses.replace(info, size=size)
    out = []
    for f in frames:
        patch = f[info.top:info.top + info.side, info.left:info.left + info.side]
        img = Image.fromarray(np.round(np.clip(patch, 0, 1) * 255).astype(np.uint8))
        out.append(np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0)
    return np.stack(out), info


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------


@dataclass
class GenerationInputs:
    waveform: np.ndarray
    rate: int
    phonemes: PhonemeProbStream  # 60 fps, restricted to the renderer's classes
    emotion: str
    intensity: float
    reference_pi_fix: dict
    reference_pi_var: list[dict]
    reference_frames: np.ndarray  # (n_ref, H, W, 3)


@dataclass
class GenerationResult:
    frames: np.ndarray
    pi_var: list[dict]
    label: np.ndarray


def predicted_pi_var(a2e: A2EModel, waveform, rate: int, n_frames: int, label_vector, mfcc_cfg: MfccConfig
                     ) -> list[dict]:
    mfcc = mfcc_for_video(waveform, rate, n_frames, mfcc_cfg).matrix
    pred = a2e.predict(mfcc, broadcast_label(label_vector, n_frames))
    return [unpack_pi_var(p, a2e.cfg.n_joints, a2e.cfg.n_expr) for p in pred]


def merge_pose(generated: Sequence[dict], reference: Sequence[dict], pose_from_reference: bool) -> list[dict]:
    """Take joints and expression from ``generated``; rotation and translation from ``reference`` if asked."""
    out = []
    for g, r in zip(generated, reference):
        p = dict(g)
        if pose_from_reference:
            p["R"], p["t"] = np.asarray(r["R"]), np.asarray(r["t"])
        out.append(p)
    return out


def generate_video(inputs: GenerationInputs, a2e: A2EModel, renderer: NeuralRenderer, model,
                   cfg: PipelineConfig, table: EmotionTable | None = None) -> GenerationResult:
    """Audio + emotion -> face parameters -> neural rendering over the reference video.

    The output has one frame per video frame of audio; the reference video
    supplies head pose (unless disabled) and background and must be at
    least that long.
    """
    n = n_video_frames(len(inputs.waveform), inputs.rate, cfg.fps)
    n_ref = len(inputs.reference_pi_var)
    if n_ref < n or inputs.reference_frames.shape[0] < n:
        raise PipelineError(
            f"reference video has {min(n_ref, inputs.reference_frames.shape[0])} frames but the audio needs {n}; "
            "the reference supplies pose and background, so generated videos cannot be longer than it")
    label = encode_emotion(inputs.emotion, inputs.intensity, table).vector
    gen = predicted_pi_var(a2e, inputs.waveform, inputs.rate, n, label, cfg.mfcc_config())
    pi_var = merge_pose(gen, inputs.reference_pi_var[:n], cfg.pose_from_reference)
    res = inputs.reference_frames.shape[1]
    uv, alpha = rasterize_track(model, inputs.reference_pi_fix, pi_var, res)
    need = 2 * n
    probs = inputs.phonemes.probs
    if probs.shape[0] < need:
        probs = np.concatenate([probs, np.repeat(probs[-1:], need - probs.shape[0], 0)]) if probs.shape[0] else \
            np.zeros((need, renderer.cfg.n_phonemes), dtype=np.float32)
    clip = RendererClip(uv, alpha, inputs.reference_frames[:n], probs)
    with torch.no_grad():
        frames = render_clip(renderer, clip)
    return GenerationResult(frames, pi_var, label)


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


def write_manifest(out_dir, command: str, cfg: PipelineConfig, argv: Sequence[str], inputs: dict | None = None,
                   outputs: Sequence | None = None, extra: dict | None = None) -> Path:
    """``manifest.json``: config snapshot, seed, argv, input/output file hashes and library versions."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def hashes(paths):
        res = {}
        for p in paths:
            p = Path(p)
            if p.is_file():
                res[str(p)] = file_hash(p)
            elif p.is_dir():
                # a frame folder: hash of the sorted per-file hashes
                h = hashlib.sha256()
                for f in sorted(q for q in p.rglob("*") if q.is_file()):
                    h.update(f"{f.relative_to(p)}:{file_hash(f)}\n".encode())
                res[str(p)] = h.hexdigest()
        return res

    manifest = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.seed,
        "config": cfg.snapshot(),
        "inputs": hashes((inputs or {}).values()),
        "outputs": hashes(outputs or []),
        "versions": {"package": __version__, "python": sys.version.split()[0], "platform": platform.platform(),
                     "numpy": np.__version__, "torch": torch.__version__},
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


# --------------------------------------------------------------------------
# Dataset folders
# --------------------------------------------------------------------------
#
# root/dataset.json         {"clips": [...], "fps", "resolution", "model"}
# root/model.npz            blendshape model used for tracking and rendering
# root/<clip>/audio.wav
# root/<clip>/phonemes.bin  raw recognizer stream, 50 fps, full class set
# root/<clip>/label.json    {"subject", "emotion", "intensity"}
# root/<clip>/track.npz     tracked (or ground-truth) parameters; track_v<k>.npz for extra valid targets
# root/<clip>/frames/*.png


@dataclass
class ClipFolder:
    path: Path

    @property
    def name(self) -> str:
        return self.path.name

    def label(self) -> dict:
        return json.loads((self.path / "label.json").read_text())

    def tracks(self) -> list[Path]:
        first = self.path / "track.npz"
        rest = sorted(self.path.glob("track_v*.npz"))
        return ([first] if first.exists() else []) + rest

    def frames(self) -> np.ndarray:
        return read_frames(self.path / "frames")

    def audio(self) -> tuple[np.ndarray, int]:
        from .audio_features import read_wav
        return read_wav(self.path / "audio.wav")

    def phonemes(self) -> tuple[np.ndarray, float, list[str]]:
        from .audio_features import read_phoneme_stream
        return read_phoneme_stream(self.path / "phonemes.bin")


def open_dataset(root) -> tuple[dict, list[ClipFolder]]:
    root = Path(root)
    index = root / "dataset.json"
    if not index.exists():
        raise PipelineError(f"{root} has no dataset.json")
    meta = json.loads(index.read_text())
    clips = [ClipFolder(root / c) for c in meta["clips"]]
    for c in clips:
        if not c.path.is_dir():
            raise PipelineError(f"clip folder {c.path} listed in dataset.json is missing")
    return meta, clips


def write_synthetic_dataset(ds, root, table: EmotionTable | None = None, subject: str = "synth") -> list[Path]:
    """Write a ``SyntheticDataset`` in the folder layout above; returns written files."""
    from .audio_features import decode_emotion, write_phoneme_stream, write_wav
    from .face_model import save_model
    from .synthetic import N_RAW_CLASSES
    from .tracker import TrackResult, save_track

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    written = [root / "model.npz"]
    save_model(written[0], ds.model)
    names = [f"ph{i:02d}" for i in range(N_RAW_CLASSES)]
    for clip in ds.clips:
        d = root / clip.name
        d.mkdir(exist_ok=True)
        write_wav(d / "audio.wav", clip.waveform, clip.rate)
        write_phoneme_stream(d / "phonemes.bin", clip.phonemes, 50.0, names)
        emotion, intensity = decode_emotion(clip.label.vector, table)
        (d / "label.json").write_text(json.dumps({"subject": subject, "emotion": emotion,
                                                  "intensity": intensity}) + "\n")
        written += [d / "audio.wav", d / "phonemes.bin", d / "label.json"]
        for v, track in enumerate(clip.pi_var):
            n = len(track)
            res = TrackResult({k: np.asarray(x) for k, x in ds.pi_fix.items()},
                              [{k: np.asarray(p[k]) for k in ("joints", "expr", "R", "t")} for p in track],
                              np.zeros(n), np.ones(n, dtype=bool))
            path = d / ("track.npz" if v == 0 else f"track_v{v}.npz")
            save_track(path, res)
            written.append(path)
        if clip.frames is not None:
            written += write_frames(d / "frames", clip.frames[0])
    meta = {"clips": [c.name for c in ds.clips], "fps": ds.scenario.fps, "resolution": ds.scenario.resolution,
            "model": "model.npz", "subject": subject}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n")
    written.append(root / "dataset.json")
    return written
