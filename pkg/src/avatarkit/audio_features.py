"""Audio-side inputs: MFCCs, phoneme-probability streams and emotion labels."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile

PHONEME_FPS = 50
RENDER_AUDIO_FPS = 60
N_PHONEMES = 50


class AudioFeatureError(ValueError):
    pass


# --------------------------------------------------------------------------
# MFCC
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MfccConfig:
    window_s: float = 0.030
    n_mels: int = 40
    n_mfcc: int = 28
    video_fps: float = 30.0
    frames_per_video_frame: int = 4
    preemphasis: float = 0.97
    log_floor: float = 1e-10
    fmin: float = 0.0
    fmax: float | None = None


@dataclass
class MfccSequence:
    matrix: np.ndarray  # (T, n_mfcc)
    audio_rate: int
    hop: int
    window: int
    video_fps: float

    @property
    def frames_per_video_frame(self) -> int:
        ratio = Fraction(self.audio_rate) / (Fraction(self.hop) * Fraction(self.video_fps).limit_denominator())
        if ratio.denominator != 1:
            raise AudioFeatureError("hop does not divide the video frame duration")
        return int(ratio)

    def __len__(self):
        return self.matrix.shape[0]


def hop_length(rate: int, cfg: MfccConfig) -> int:
    per_second = Fraction(cfg.video_fps).limit_denominator() * cfg.frames_per_video_frame
    hop = Fraction(rate) / per_second
    if hop.denominator != 1:
        step = per_second.numerator
        lower = max(step, rate // step * step)
        raise AudioFeatureError(
            f"{rate} Hz cannot be split into {cfg.frames_per_video_frame} MFCC frames per video frame "
            f"at {cfg.video_fps} fps; resample to a multiple of {step} Hz (e.g. {lower} or {lower + step} Hz)")
    return int(hop)


def mel_filterbank(rate: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None):
    """Triangular HTK-mel filters, ``(n_mels, n_fft // 2 + 1)``."""
    fmax = fmax or rate / 2.0

    def hz2mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel2hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    edges = mel2hz(np.linspace(hz2mel(fmin), hz2mel(fmax), n_mels + 2))
    freqs = np.linspace(0.0, rate / 2.0, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def compute_mfcc(waveform, rate: int, cfg: MfccConfig | None = None) -> MfccSequence:
    """Pre-emphasis, Hamming-windowed power spectrum, mel filterbank, log and DCT-II.

    The hop is chosen so that ``cfg.frames_per_video_frame`` MFCC frames span
    one video frame.  Frame count is ``(len - window) // hop + 1``.
    """
    cfg = cfg or MfccConfig()
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise AudioFeatureError("compute_mfcc expects mono PCM")
    if x.size == 0:
        raise AudioFeatureError("empty waveform")
    if rate < 8000:
        raise AudioFeatureError(f"sample rate {rate} Hz is below 8 kHz")
    hop = hop_length(rate, cfg)
    win = int(round(cfg.window_s * rate))
    if x.size < win:
        raise AudioFeatureError(f"waveform shorter than one {win}-sample window")
    n_fft = 1 << (win - 1).bit_length()

    y = np.append(x[0], x[1:] - cfg.preemphasis * x[:-1])
    n_frames = (y.size - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = y[idx] * np.hamming(win)
    power = np.abs(np.fft.rfft(frames, n_fft)) ** 2 / n_fft
    mel = power @ mel_filterbank(rate, n_fft, cfg.n_mels, cfg.fmin, cfg.fmax).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    coeffs = dct(logmel, type=2, axis=1, norm="ortho")[:, :cfg.n_mfcc]
    return MfccSequence(coeffs, rate, hop, win, cfg.video_fps)


def mfcc_for_video(waveform, rate: int, n_video_frames: int, cfg: MfccConfig | None = None) -> MfccSequence:
    """MFCCs padded/trimmed to exactly ``k * n_video_frames`` rows (k frames per video frame)."""
    cfg = cfg or MfccConfig()
    hop = hop_length(rate, cfg)
    win = int(round(cfg.window_s * rate))
    need = (cfg.frames_per_video_frame * n_video_frames - 1) * hop + win
    x = np.asarray(waveform, dtype=np.float64)
    if x.size < need:
        x = np.concatenate([x, np.zeros(need - x.size)])
    seq = compute_mfcc(x, rate, cfg)
    seq.matrix = seq.matrix[:cfg.frames_per_video_frame * n_video_frames]
    return seq


def n_video_frames(n_samples: int, rate: int, fps: float) -> int:
    return math.ceil(Fraction(n_samples, rate) * Fraction(fps).limit_denominator())


# --------------------------------------------------------------------------
# Emotion labels
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EmotionTable:
    """Emotion names in slot order; ``neutral`` has no slot."""

    slots: tuple[str, ...]
    neutral: str = "neutral"

    @property
    def names(self) -> tuple[str, ...]:
        return (self.neutral,) + self.slots

    @property
    def dim(self) -> int:
        return len(self.slots)

    @classmethod
    def parse(cls, text: str) -> "EmotionTable":
        slots: dict[int, str] = {}
        neutral = None
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            value = value.lower()
            if value in ("none", "-1", "neutral"):
                neutral = key
            else:
                slots[int(value)] = key
        if neutral is None:
            raise AudioFeatureError("emotion table lacks a neutral entry")
        if sorted(slots) != list(range(len(slots))):
            raise AudioFeatureError("emotion slots must be 0..N-2 without gaps")
        return cls(tuple(slots[i] for i in range(len(slots))), neutral)

    @classmethod
    def load(cls, path) -> "EmotionTable":
        return cls.parse(Path(path).read_text())

    @classmethod
    def default(cls) -> "EmotionTable":
        return cls.parse(resources.files("avatarkit.data").joinpath("emotions.cfg").read_text())


@dataclass(frozen=True)
class EmotionLabel:
    vector: np.ndarray
    name: str
    intensity: float


def encode_emotion(name: str, intensity: float, table: EmotionTable | None = None) -> EmotionLabel:
    table = table or EmotionTable.default()
    if name not in table.names:
        raise AudioFeatureError(f"unknown emotion {name!r}; valid: {', '.join(table.names)}")
    if not 0.0 <= intensity <= 1.0:
        raise AudioFeatureError(f"intensity must lie in [0, 1], got {intensity}")
    c = np.zeros(table.dim)
    if name != table.neutral:
        c[table.slots.index(name)] = intensity
    return EmotionLabel(c, name, float(intensity))


def decode_emotion(vector, table: EmotionTable | None = None) -> tuple[str, float]:
    table = table or EmotionTable.default()
    v = np.asarray(vector, dtype=np.float64)
    nz = np.flatnonzero(v)
    if nz.size == 0:
        return table.neutral, 0.0
    if nz.size > 1:
        raise AudioFeatureError("emotion label has more than one active slot")
    return table.slots[nz[0]], float(v[nz[0]])


def broadcast_label(label, n_frames: int) -> np.ndarray:
    c = np.asarray(getattr(label, "vector", label), dtype=np.float64)
    return np.tile(c, (max(n_frames, 0), 1))


# --------------------------------------------------------------------------
# Phoneme probability streams
# --------------------------------------------------------------------------


@dataclass
class PhonemeProbStream:
    probs: np.ndarray  # (T, 50)
    classes: np.ndarray  # indices into the recognizer's full class list
    fps: float = RENDER_AUDIO_FPS

    def __post_init__(self):
        if self.probs.ndim != 2 or self.probs.shape[1] != len(self.classes):
            raise AudioFeatureError("probability columns must match the class list")
        if self.probs.size and (self.probs.min() < 0 or self.probs.sum(1).max() > 1 + 1e-6):
            raise AudioFeatureError("phoneme rows must be non-negative with sums <= 1")

    def __len__(self):
        return self.probs.shape[0]


def select_top_phonemes(streams, k: int = N_PHONEMES) -> tuple[np.ndarray, float]:
    """Classes ranked by total probability mass (ties: lower index first) and their mass share."""
    streams = [np.asarray(s, dtype=np.float64) for s in streams]
    if not streams:
        raise AudioFeatureError("need at least one stream")
    mass = sum(s.sum(0) for s in streams)
    order = np.argsort(-mass, kind="stable")[:k]
    total = mass.sum()
    coverage = float(mass[order].sum() / total) if total > 0 else 1.0
    return order, coverage


def resample_linear(x: np.ndarray, in_fps: float, out_fps: float) -> np.ndarray:
    """Linear interpolation in time; output length ``round(T * out_fps / in_fps)``."""
    t_in = np.arange(x.shape[0]) / in_fps
    n_out = int(round(x.shape[0] * out_fps / in_fps))
    t_out = np.arange(n_out) / out_fps
    return np.stack([np.interp(t_out, t_in, x[:, c]) for c in range(x.shape[1])], 1) \
        if x.shape[1] else np.zeros((n_out, 0))


def restrict_and_resample(raw, top: np.ndarray, in_fps: float = PHONEME_FPS,
                          out_fps: float = RENDER_AUDIO_FPS) -> PhonemeProbStream:
    """Keep the ``top`` classes (dropped mass is not renormalized) and resample 50 -> 60 fps."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] == 0:
        raise AudioFeatureError("empty phoneme stream")
    if in_fps != PHONEME_FPS:
        raise AudioFeatureError(f"phoneme streams must be {PHONEME_FPS} fps, got {in_fps}")
    top = np.asarray(top, dtype=np.int64)
    if top.min() < 0 or top.max() >= raw.shape[1]:
        raise AudioFeatureError("phoneme class index out of range")
    out = resample_linear(raw[:, top], in_fps, out_fps)
    return PhonemeProbStream(out.astype(np.float32), top, out_fps)


def audio_window(stream: np.ndarray, video_frame: int, W: int) -> np.ndarray:
    """The ``2W x C`` slice of a 60 fps stream centred on ``video_frame`` (30 fps), edge-padded."""
    centre = 2 * video_frame
    idx = np.clip(np.arange(centre - W, centre + W), 0, stream.shape[0] - 1)
    return stream[idx]


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def write_phoneme_stream(path, probs, fps: float, class_names) -> None:
    """One JSON header line (fps, class names, shape) followed by little-endian float32 data."""
    probs = np.ascontiguousarray(probs, dtype="<f4")
    header = {"format": "phoneme-stream", "version": 1, "fps": fps,
              "classes": list(class_names), "shape": list(probs.shape)}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(probs.tobytes())


def read_phoneme_stream(path) -> tuple[np.ndarray, float, list[str]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(header["shape"]).astype(np.float32), header["fps"], header["classes"]


def read_wav(path) -> tuple[np.ndarray, int]:
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype.kind == "f":
        x = data.astype(np.float64)
    else:
        raise AudioFeatureError(f"unsupported WAV sample type {data.dtype}; expected 16-bit PCM")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return x, int(rate)


def write_wav(path, waveform, rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(waveform) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, rate, pcm)
