"""Conditional GAN from MFCC audio and an emotion label to per-frame face parameters.

Both networks are encoder / LSTM / decoder stacks.  The generator maps each
video frame's group of MFCC frames plus the label to one parameter vector;
the discriminator scores (parameters, audio, label) per frame.  Training uses
L1 + lambda_gan * LSGAN + lambda_vel * velocity-L1.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import (load_checkpoint, load_module, load_optimizer, module_arrays, optimizer_arrays,
                         save_checkpoint)

log = logging.getLogger(__name__)

PI_VAR_KEYS = ("joints", "expr", "rvec", "t")


class TrainingError(RuntimeError):
    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class A2EConfig:
    n_mfcc: int = 28
    frames_per_video_frame: int = 4
    label_dim: int = 7
    n_joints: int = 2
    n_expr: int = 8
    latent: int = 128
    lambda_gan: float = 0.02
    lambda_vel: float = 100.0
    lr: float = 1e-4
    disc_lr: float | None = None  # defaults to lr
    epochs: int = 10
    batch_size: int = 8
    chunk: int = 64
    predict_pose: bool = True

    @property
    def out_dim(self) -> int:
        return 3 * self.n_joints + self.n_expr + 6

    @property
    def audio_dim(self) -> int:
        return self.n_mfcc * self.frames_per_video_frame


# --------------------------------------------------------------------------
# Parameter packing
# --------------------------------------------------------------------------


def pack_pi_var(pi_var: dict, n_joints: int, n_expr: int) -> np.ndarray:
    """``[joints (3J), expr (E), rotation axis-angle (3), translation (3)]``."""
    from .face_model import matrix_to_axis_angle

    rvec = pi_var.get("rvec")
    if rvec is None:
        rvec = matrix_to_axis_angle(torch.as_tensor(np.asarray(pi_var["R"]))).numpy()
    return np.concatenate([np.asarray(pi_var["joints"]).reshape(3 * n_joints), np.asarray(pi_var["expr"]),
                           np.asarray(rvec).reshape(3), np.asarray(pi_var["t"]).reshape(3)])


def unpack_pi_var(vec, n_joints: int, n_expr: int) -> dict[str, np.ndarray]:
    from .face_model import axis_angle_to_matrix

    vec = np.asarray(vec, dtype=np.float64)
    j = 3 * n_joints
    rvec = vec[j + n_expr:j + n_expr + 3]
    return {"joints": vec[:j].reshape(n_joints, 3), "expr": vec[j:j + n_expr].copy(),
            "R": axis_angle_to_matrix(torch.as_tensor(rvec)).numpy(), "t": vec[j + n_expr + 3:].copy()}


@dataclass
class Normalizer:
    """Per-dimension z-score for the mixed-unit parameter vector."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, targets) -> "Normalizer":
        x = np.concatenate([np.asarray(t, dtype=np.float64) for t in targets], 0)
        std = x.std(0)
        return cls(x.mean(0), np.where(std > 1e-8, std, 1.0))

    def normalize(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x) * self.std + self.mean


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------


def group_audio(mfcc: torch.Tensor, n_frames: int, k: int) -> torch.Tensor:
    """``(B, k*n, n_mfcc)`` -> ``(B, n, k*n_mfcc)``: the MFCC frames of each video frame side by side."""
    if mfcc.shape[-2] != k * n_frames:
        raise ValueError(f"audio has {mfcc.shape[-2]} MFCC frames but {n_frames} video frames "
                         f"need exactly {k * n_frames}")
    return mfcc.reshape(*mfcc.shape[:-2], n_frames, k * mfcc.shape[-1])


class A2EGenerator(nn.Module):
    def __init__(self, cfg: A2EConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.Sequential(nn.Linear(cfg.audio_dim + cfg.label_dim, cfg.latent), nn.LeakyReLU(0.2))
        self.temporal = nn.LSTM(cfg.latent, cfg.latent, batch_first=True)
        # the decoder also sees the label directly: a per-clip constant offset path
        # that the velocity term cannot disturb
        self.decoder = nn.Linear(cfg.latent + cfg.label_dim, cfg.out_dim)

    def forward(self, mfcc: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """``mfcc (B, k*n, n_mfcc)``, ``labels (B, n, N-1)`` -> ``(B, n, out_dim)``."""
        audio = group_audio(mfcc, labels.shape[-2], self.cfg.frames_per_video_frame)
        labels = labels.to(audio.dtype)
        h = self.encoder(torch.cat([audio, labels], -1))
        h, _ = self.temporal(h)
        return self.decoder(torch.cat([h, labels], -1))


class A2EDiscriminator(nn.Module):
    def __init__(self, cfg: A2EConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.Sequential(
            nn.Linear(cfg.out_dim + cfg.audio_dim + cfg.label_dim, cfg.latent), nn.LeakyReLU(0.2))
        self.temporal = nn.LSTM(cfg.latent, cfg.latent, batch_first=True)
        self.decoder = nn.Linear(cfg.latent, 1)

    def forward(self, params: torch.Tensor, mfcc: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """One realness score per frame, ``(B, n)``."""
        audio = group_audio(mfcc, params.shape[-2], self.cfg.frames_per_video_frame)
        h = self.encoder(torch.cat([params, audio, labels.to(params.dtype)], -1))
        h, _ = self.temporal(h)
        return self.decoder(h)[..., 0]


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def velocity_loss(pred: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """Mean ``|dpred_t - dreal_t|`` with ``dx_t = x_{t+1} - x_t`` along the frame axis (-2)."""
    pred, real = torch.as_tensor(pred), torch.as_tensor(real)
    if pred.shape != real.shape:
        raise ValueError("velocity_loss needs sequences of equal shape")
    if pred.ndim < 2 or pred.shape[-2] < 2:
        raise ValueError("velocity_loss needs at least 2 frames")
    return (torch.diff(pred, dim=-2) - torch.diff(real, dim=-2)).abs().mean()


def lsgan_losses(d_real, d_fake) -> tuple[torch.Tensor, torch.Tensor]:
    """``(generator loss, discriminator loss)`` of the least-squares GAN."""
    d_real, d_fake = torch.as_tensor(d_real), torch.as_tensor(d_fake)
    disc = 0.5 * ((d_real - 1.0) ** 2).mean() + 0.5 * (d_fake ** 2).mean()
    gen = 0.5 * ((d_fake - 1.0) ** 2).mean()
    return gen, disc


def combine_a2e_loss(l1, gan, vel, lambda_gan: float = 0.02, lambda_vel: float = 100.0):
    return l1 + lambda_gan * gan + lambda_vel * vel


def a2e_loss(pred, real, d_fake=None, lambda_gan: float = 0.02, lambda_vel: float = 100.0):
    """Total generator objective and its components.

    ``d_fake`` are discriminator scores on ``pred``; ``None`` drops the
    adversarial term (it is reported as 0).
    """
    l1 = (pred - real).abs().mean()
    vel = velocity_loss(pred, real)
    gan = lsgan_losses(torch.ones(()), d_fake)[0] if d_fake is not None else torch.zeros((), dtype=l1.dtype)
    total = combine_a2e_loss(l1, gan, vel, lambda_gan, lambda_vel)
    return total, {"l1": l1, "gan": gan, "vel": vel, "total": total}


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


@dataclass
class A2ESample:
    mfcc: np.ndarray  # (k*n, n_mfcc)
    label: np.ndarray  # (N-1,)
    target: np.ndarray  # (n, out_dim), packed pi_var
    name: str = ""

    @property
    def n_frames(self) -> int:
        return self.target.shape[0]


def make_chunks(samples, chunk: int, k: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Non-overlapping ``chunk``-frame windows; a sequence shorter than ``chunk`` is kept whole."""
    out = []
    for s in samples:
        n = s.n_frames
        if n < 2:
            continue
        size = min(chunk, n)
        for start in range(0, n - size + 1, size):
            out.append((s.mfcc[k * start:k * (start + size)], np.tile(s.label, (size, 1)),
                        s.target[start:start + size]))
    return out


def _batches(chunks, batch_size: int, rng: np.random.Generator):
    """Shuffled batches of equal-length chunks.

    Chunks with identical audio and label (alternative valid targets of one
    input) always share a batch, so their opposing regression gradients cancel
    instead of alternating from step to step.
    """
    groups: dict[tuple, list[int]] = {}
    for i, (a, c, y) in enumerate(chunks):
        key = (y.shape[0], hashlib.sha1(np.ascontiguousarray(a).tobytes() + np.ascontiguousarray(c).tobytes()).hexdigest())
        groups.setdefault(key, []).append(i)
    keys = list(groups)
    by_len: dict[int, list[list[int]]] = {}
    for g in rng.permutation(len(keys)):
        by_len.setdefault(keys[g][0], []).append(groups[keys[g]])
    batches = []
    for grps in by_len.values():
        cur: list[int] = []
        for grp in grps:
            if cur and len(cur) + len(grp) > batch_size:
                batches.append(cur)
                cur = []
            cur = cur + grp
        if cur:
            batches.append(cur)
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def _stack(chunks, idx, normalizer: Normalizer, audio_norm: Normalizer, dtype):
    a = torch.as_tensor(np.stack([audio_norm.normalize(chunks[i][0]) for i in idx]), dtype=dtype)
    c = torch.as_tensor(np.stack([chunks[i][1] for i in idx]), dtype=dtype)
    y = torch.as_tensor(np.stack([normalizer.normalize(chunks[i][2]) for i in idx]), dtype=dtype)
    return a, c, y


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class A2EModel:
    generator: A2EGenerator
    normalizer: Normalizer
    audio_norm: Normalizer
    cfg: A2EConfig

    @torch.no_grad()
    def predict(self, mfcc, labels) -> np.ndarray:
        """De-normalized parameter sequence ``(n, out_dim)`` for one clip."""
        p = next(self.generator.parameters())
        a = torch.as_tensor(self.audio_norm.normalize(mfcc), dtype=p.dtype)[None]
        c = torch.as_tensor(np.asarray(labels), dtype=p.dtype)[None]
        out = self.generator(a, c)[0].numpy().astype(np.float64)
        return self.normalizer.denormalize(out)

    def predict_normalized(self, mfcc, labels) -> np.ndarray:
        return self.normalizer.normalize(self.predict(mfcc, labels))


@dataclass
class A2ETrainResult:
    model: A2EModel
    discriminator: A2EDiscriminator
    curves: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def epoch_losses(self, epoch: int) -> list[dict]:
        return [c for c in self.curves if c["epoch"] == epoch]


def _checkpoint_state(gen, disc, opt_g, opt_d, normalizer, audio_norm, cfg, epoch, seed):
    arrays = {**module_arrays("gen", gen), **module_arrays("disc", disc),
              "norm/mean": normalizer.mean, "norm/std": normalizer.std,
              "audio_norm/mean": audio_norm.mean, "audio_norm/std": audio_norm.std}
    og, groups_g = optimizer_arrays("opt_gen", opt_g)
    od, groups_d = optimizer_arrays("opt_disc", opt_d)
    arrays.update(og)
    arrays.update(od)
    meta = {"kind": "a2e", "config": asdict(cfg), "epoch": epoch, "seed": seed,
            "opt_gen_groups": groups_g, "opt_disc_groups": groups_d}
    return arrays, meta


def load_a2e(path) -> A2EModel:
    arrays, meta = load_checkpoint(path, kind="a2e")
    cfg = A2EConfig(**meta["config"])
    gen = A2EGenerator(cfg)
    load_module("gen", gen, arrays)
    gen.eval()
    return A2EModel(gen, Normalizer(arrays["norm/mean"], arrays["norm/std"]),
                    Normalizer(arrays["audio_norm/mean"], arrays["audio_norm/std"]), cfg)


def train_a2e(samples: list[A2ESample], cfg: A2EConfig, seed: int, out_dir=None,
              resume=None, dtype=torch.float32) -> A2ETrainResult:
    """Alternating LSGAN discriminator / generator updates with Adam.

    Deterministic given ``seed``: weights are initialized from it and each
    epoch's batch order comes from ``default_rng([seed, epoch])``.  With
    ``lambda_gan == 0`` the discriminator is never updated.  A checkpoint is
    written per epoch when ``out_dir`` is given; ``resume`` continues from one.
    """
    torch.manual_seed(seed)
    gen = A2EGenerator(cfg).to(dtype)
    disc = A2EDiscriminator(cfg).to(dtype)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.disc_lr if cfg.disc_lr is not None else cfg.lr)
    normalizer = Normalizer.fit([s.target for s in samples])
    audio_norm = Normalizer.fit([s.mfcc for s in samples])
    start_epoch = 0
    if resume is not None:
        arrays, meta = load_checkpoint(resume, kind="a2e")
        load_module("gen", gen, arrays)
        load_module("disc", disc, arrays)
        load_optimizer("opt_gen", opt_g, arrays, meta["opt_gen_groups"])
        load_optimizer("opt_disc", opt_d, arrays, meta["opt_disc_groups"])
        normalizer = Normalizer(arrays["norm/mean"], arrays["norm/std"])
        audio_norm = Normalizer(arrays["audio_norm/mean"], arrays["audio_norm/std"])
        start_epoch = meta["epoch"] + 1

    chunks = make_chunks(samples, cfg.chunk, cfg.frames_per_video_frame)
    if not chunks:
        raise TrainingError("no training sequences with at least 2 frames")
    pose_mask = torch.ones(cfg.out_dim, dtype=dtype)
    if not cfg.predict_pose:
        pose_mask[-6:] = 0.0

    out_dir = Path(out_dir) if out_dir is not None else None
    result = A2ETrainResult(A2EModel(gen, normalizer, audio_norm, cfg), disc)
    last_ckpt = Path(resume) if resume is not None else None
    use_gan = cfg.lambda_gan > 0
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([seed, epoch])
        for step, idx in enumerate(_batches(chunks, cfg.batch_size, rng)):
            a, c, y = _stack(chunks, idx, normalizer, audio_norm, dtype)
            y = y * pose_mask
            disc_loss = torch.zeros((), dtype=dtype)
            if use_gan:
                with torch.no_grad():
                    fake = gen(a, c) * pose_mask
                _, disc_loss = lsgan_losses(disc(y, a, c), disc(fake, a, c))
                opt_d.zero_grad()
                disc_loss.backward()
                opt_d.step()

            fake = gen(a, c) * pose_mask
            d_fake = disc(fake, a, c) if use_gan else None
            total, parts = a2e_loss(fake, y, d_fake, cfg.lambda_gan, cfg.lambda_vel)
            if not (torch.isfinite(total) and torch.isfinite(disc_loss)):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}", last_ckpt)
            opt_g.zero_grad()
            total.backward()
            opt_g.step()
            result.curves.append({"epoch": epoch, "step": step, **{k: v.item() for k, v in parts.items()},
                                  "disc": disc_loss.item()})
        if out_dir is not None:
            arrays, meta = _checkpoint_state(gen, disc, opt_g, opt_d, normalizer, audio_norm, cfg,
                                             epoch, seed)
            last_ckpt = save_checkpoint(out_dir / f"a2e_epoch{epoch:03d}.ckpt", arrays, meta)
            result.checkpoints.append(last_ckpt)
        log.info("a2e epoch %d: %s", epoch, _epoch_summary(result.curves, epoch))
    gen.eval()
    return result


def _epoch_summary(curves, epoch) -> str:
    rows = [c for c in curves if c["epoch"] == epoch]
    if not rows:
        return "no steps"
    keys = ("total", "l1", "gan", "vel", "disc")
    return ", ".join(f"{k}={np.mean([r[k] for r in rows]):.4g}" for k in keys)


def write_curves(path, curves: list[dict]) -> None:
    if not curves:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(curves[0]))
        w.writeheader()
        w.writerows(curves)


def sequence_variance_ratio(generated, real, dims=None) -> float:
    """Mean temporal variance of generated sequences over that of the real ones."""
    def tv(seqs):
        return float(np.mean([np.var(np.asarray(s)[:, dims] if dims is not None else s, axis=0).mean()
                              for s in seqs]))

    return tv(generated) / tv(real)
