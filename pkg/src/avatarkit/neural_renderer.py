"""Audio-conditioned neural texture and windowed image-to-image renderer.

Per frame the pipeline is:

1. a window of phoneme probabilities is encoded to a small vector ``a_enc``;
2. a sinusoidal coordinate network maps ``(u, v, a_enc)`` at every covered
   pixel to 16 feature channels (no texture lookup, so no fixed resolution);
3. the real frame with the face region (grown by ``d`` pixels) blacked out
   is combined with a preview of the features, and stacked with the UV
   rasters of neighbouring frames;
4. a U-Net turns that stack into RGB, and the result is composited over the
   real background outside the grown mask.

Images are ``(H, W, C)`` at the API surface and ``(B, C, H, W)`` inside the
networks.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .audio2expression import TrainingError, lsgan_losses
from .audio_features import N_PHONEMES, audio_window
from .checkpoint import (CheckpointError, layout_hash, load_checkpoint, load_module, load_optimizer,
                         module_arrays, optimizer_arrays, save_checkpoint)

log = logging.getLogger(__name__)

N_TEXTURE_CHANNELS = 16
TEXTURE_CHUNK = 512


class RendererError(ValueError):
    pass


@dataclass
class RendererConfig:
    W: int = 8  # audio window half-width in video frames (2W audio frames at 60 fps)
    W_R: int = 2  # neighbouring UV rasters
    N_a: int = 32
    n_phonemes: int = N_PHONEMES
    omega0: float = 30.0
    audio_init_gain: float = 0.1
    dilation_at_256: float = 8.0
    audio_hidden: int = 32
    texture_hidden: int = 64
    texture_layers: int = 3
    unet_base: int = 16
    unet_depth: int = 3
    disc_base: int = 16
    lambda_l1: float = 1.0
    lambda_perc: float = 1.0
    lambda_gan: float = 0.01
    lr: float = 1e-4
    epochs: int = 5
    batch_size: int = 4
    audio_texture: bool = True

    @property
    def in_channels(self) -> int:
        return N_TEXTURE_CHANNELS + 2 * self.W_R + 3

    def dilation(self, resolution: int) -> int:
        return int(round(self.dilation_at_256 * resolution / 256.0))


# --------------------------------------------------------------------------
# Audio encoder
# --------------------------------------------------------------------------


class AudioEncoder(nn.Module):
    """``(B, 2W, n_phonemes)`` -> ``(B, N_a)``.

    Per-frame linear layer, two stride-2 temporal convolutions, flatten over
    the remaining time steps, linear output layer.
    """

    def __init__(self, W: int, n_phonemes: int = N_PHONEMES, n_out: int = 32, hidden: int = 32):
        super().__init__()
        self.W, self.n_phonemes = W, n_phonemes
        self.frame = nn.Linear(n_phonemes, hidden)
        self.temporal = nn.Sequential(
            nn.Conv1d(hidden, hidden, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv1d(hidden, hidden, 3, stride=2, padding=1), nn.LeakyReLU(0.2))
        steps = 2 * W
        for _ in range(2):
            steps = (steps - 1) // 2 + 1
        self.out = nn.Linear(hidden * steps, n_out)
        # unit-scale code to match the [-1, 1] coordinates fed to the sine layers
        self.norm = nn.LayerNorm(n_out, elementwise_affine=False)

    def forward(self, window: torch.Tensor) -> torch.Tensor:
        if window.shape[-2:] != (2 * self.W, self.n_phonemes):
            raise RendererError(f"audio window must be (2W={2 * self.W}, {self.n_phonemes}), "
                                f"got {tuple(window.shape[-2:])}")
        squeeze = window.ndim == 2
        x = window[None] if squeeze else window
        h = F.leaky_relu(self.frame(x), 0.2).transpose(1, 2)
        h = self.temporal(h).flatten(1)
        out = self.norm(self.out(h))
        return out[0] if squeeze else out


# --------------------------------------------------------------------------
# Neural texture
# --------------------------------------------------------------------------


class SineLayer(nn.Module):
    def __init__(self, n_in: int, n_out: int, omega0: float, first: bool):
        super().__init__()
        self.omega0 = omega0
        self.linear = nn.Linear(n_in, n_out)
        bound = 1.0 / n_in if first else math.sqrt(6.0 / n_in) / omega0
        with torch.no_grad():
            self.linear.weight.uniform_(-bound, bound)

    def forward(self, x):
        return torch.sin(self.omega0 * self.linear(x))


class TextureNetwork(nn.Module):
    """Sinusoidal MLP from ``(u, v, a_enc)`` to 16 feature channels."""

    def __init__(self, n_audio: int = 32, hidden: int = 64, layers: int = 3, omega0: float = 30.0,
                 n_out: int = N_TEXTURE_CHANNELS, audio_gain: float = 0.1):
        super().__init__()
        self.n_audio = n_audio
        sizes = [2 + n_audio] + [hidden] * layers
        self.body = nn.Sequential(*[SineLayer(a, b, omega0, i == 0)
                                    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))])
        with torch.no_grad():
            # a unit-scale audio code should start as a mild phase shift, not a
            # full re-randomization of the spatial features
            self.body[0].linear.weight[:, 2:] *= audio_gain
        self.head = nn.Linear(hidden, n_out)
        bound = math.sqrt(6.0 / hidden) / omega0
        with torch.no_grad():
            self.head.weight.uniform_(-bound, bound)

    def forward(self, uv: torch.Tensor, a_enc: torch.Tensor) -> torch.Tensor:
        """``uv (N, 2)``; ``a_enc`` is ``(N_a,)`` (shared) or ``(N, N_a)``."""
        if a_enc.ndim == 1:
            a_enc = a_enc.expand(uv.shape[0], -1)
        return self.head(self.body(torch.cat([uv, a_enc.to(uv.dtype)], -1)))


def texture_forward(net: TextureNetwork, uv: torch.Tensor, a_enc: torch.Tensor,
                    chunk: int = TEXTURE_CHUNK) -> torch.Tensor:
    """Evaluate the texture at arbitrary UVs, ``(N, 2)`` -> ``(N, 16)``.

    Queries are processed in zero-padded blocks of a fixed size so each
    result is bitwise independent of how many other points are evaluated
    alongside it (matrix kernels otherwise change with the batch shape).
    """
    n = uv.shape[0]
    if a_enc.ndim == 1:
        a_enc = a_enc.expand(n, -1)
    out = []
    for s in range(0, n, chunk):
        u, a = uv[s:s + chunk], a_enc[s:s + chunk]
        m = u.shape[0]
        if m < chunk:
            u = torch.cat([u, u.new_zeros(chunk - m, 2)])
            a = torch.cat([a, a.new_zeros(chunk - m, a.shape[1])])
        out.append(net(u, a)[:m])
    if not out:
        p = next(net.parameters())
        return uv.new_zeros(0, net.head.out_features).to(p.dtype)
    return torch.cat(out)


def texture_raster(net: TextureNetwork, uv_image: torch.Tensor, alpha: torch.Tensor,
                   a_enc: torch.Tensor) -> torch.Tensor:
    """16-channel ``(H, W, 16)`` feature image, zero where ``alpha`` is 0."""
    h, w = alpha.shape
    p = next(net.parameters())
    mask = alpha > 0.5
    feats = texture_forward(net, uv_image[mask].to(p.dtype), a_enc.to(p.dtype))
    out = torch.zeros(h, w, net.head.out_features, dtype=p.dtype)
    return out.index_put((mask,), feats)


# --------------------------------------------------------------------------
# Masks and compositing
# --------------------------------------------------------------------------


def disc_footprint(d: int) -> np.ndarray:
    """Structuring element ``{(dy, dx): dy^2 + dx^2 <= d^2}``; d=1 is the 4-neighbourhood."""
    r = np.arange(-d, d + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= d * d


def expand_mask(alpha, d: int):
    """Binary dilation of ``alpha > 0.5`` with a disc of radius ``d`` pixels."""
    if d < 0:
        raise RendererError("dilation radius must be >= 0")
    is_tensor = isinstance(alpha, torch.Tensor)
    a = (alpha.detach().cpu().numpy() if is_tensor else np.asarray(alpha)) > 0.5
    grown = ndimage.binary_dilation(a, structure=disc_footprint(d)) if d > 0 else a
    if is_tensor:
        return torch.as_tensor(grown, dtype=alpha.dtype if alpha.dtype.is_floating_point else torch.float64)
    return grown.astype(np.float64)


def blend(rendered, real, alpha, alpha_exp):
    """``alpha * rendered + (1 - alpha_exp) * real``: face from the rendering,
    a black border in ``alpha_exp \\ alpha`` and the real frame elsewhere."""
    rendered, real = torch.as_tensor(rendered), torch.as_tensor(real)
    alpha, alpha_exp = torch.as_tensor(alpha), torch.as_tensor(alpha_exp)
    if rendered.shape != real.shape or alpha.shape != alpha_exp.shape or alpha.shape != real.shape[:2]:
        raise RendererError(f"blend shapes disagree: rendered {tuple(rendered.shape)}, real "
                            f"{tuple(real.shape)}, alpha {tuple(alpha.shape)}, alpha_exp {tuple(alpha_exp.shape)}")
    dtype = torch.promote_types(rendered.dtype, real.dtype)
    a = alpha.to(dtype)[..., None]
    ae = alpha_exp.to(dtype)[..., None]
    return a * rendered.to(dtype) + (1 - ae) * real.to(dtype)


def neighbor_offsets(W_R: int) -> list[int]:
    """Frame offsets of the neighbour UV rasters in channel order: -1, +1, -2, +2, ..."""
    out = []
    k = 1
    while len(out) < W_R:
        out.append(-k)
        if len(out) < W_R:
            out.append(k)
        k += 1
    return out


def channel_layout(W_R: int) -> list[str]:
    names = [f"texture{i}" for i in range(N_TEXTURE_CHANNELS)]
    for off in neighbor_offsets(W_R):
        names += [f"uv[{off:+d}].u", f"uv[{off:+d}].v"]
    return names + ["blend.r", "blend.g", "blend.b"]


def assemble_renderer_input(texture: torch.Tensor, neighbor_uvs: Sequence[torch.Tensor],
                            blended: torch.Tensor, W_R: int | None = None) -> torch.Tensor:
    """Concatenate ``texture (H,W,16)``, neighbour UVs ``W_R x (H,W,2)`` and ``blended (H,W,3)``."""
    if W_R is not None and len(neighbor_uvs) != W_R:
        raise RendererError(f"expected {W_R} neighbour rasters, got {len(neighbor_uvs)}")
    hw = tuple(texture.shape[:2])
    if texture.shape[-1] != N_TEXTURE_CHANNELS:
        raise RendererError(f"texture raster must have {N_TEXTURE_CHANNELS} channels")
    if blended.shape != hw + (3,):
        raise RendererError("blended frame must be (H, W, 3) at the texture resolution")
    for u in neighbor_uvs:
        if u.shape != hw + (2,):
            raise RendererError("neighbour UV rasters must be (H, W, 2) at the texture resolution")
    dtype = texture.dtype
    return torch.cat([texture, *[u.to(dtype) for u in neighbor_uvs], blended.to(dtype)], -1)


# --------------------------------------------------------------------------
# Image networks
# --------------------------------------------------------------------------


class RendererNetwork(nn.Module):
    """U-Net with strided-conv downsampling, upsample + conv decoding and skip connections."""

    def __init__(self, in_channels: int, base: int = 16, depth: int = 3):
        super().__init__()
        self.in_channels, self.depth = in_channels, depth
        self.stem = nn.Sequential(nn.Conv2d(in_channels, base, 3, padding=1), nn.LeakyReLU(0.2))
        chans = [base * 2 ** min(i, 3) for i in range(depth + 1)]
        self.down = nn.ModuleList(nn.Sequential(nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1),
                                                nn.LeakyReLU(0.2)) for i in range(depth))
        self.up = nn.ModuleList(nn.Sequential(nn.Conv2d(chans[i + 1] + chans[i], chans[i], 3, padding=1),
                                              nn.LeakyReLU(0.2)) for i in reversed(range(depth)))
        self.head = nn.Conv2d(base, 3, 3, padding=1)
        with torch.no_grad():
            self.head.bias.fill_(0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, C, H, W)`` -> RGB ``(B, 3, H, W)`` clamped to [0, 1]."""
        if x.shape[1] != self.in_channels:
            raise RendererError(f"renderer expects {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[-1] % 2 ** self.depth or x.shape[-2] % 2 ** self.depth:
            raise RendererError(f"image size must be divisible by {2 ** self.depth}")
        skips = [self.stem(x)]
        for layer in self.down:
            skips.append(layer(skips[-1]))
        h = skips.pop()
        for layer in self.up:
            skip = skips.pop()
            h = layer(torch.cat([F.interpolate(h, size=skip.shape[-2:], mode="nearest"), skip], 1))
        return torch.clamp(self.head(h), 0.0, 1.0)


class PatchDiscriminator(nn.Module):
    """Five 4x4 convolutions (three stride 2); each output cell sees a 70x70 patch."""

    def __init__(self, in_channels: int = 6, base: int = 16):
        super().__init__()
        c = [base, base * 2, base * 4, base * 8]
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c[0], 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(c[0], c[1], 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(c[1], c[2], 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(c[2], c[3], 4, 1, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(c[3], 1, 4, 1, 1))

    def forward(self, image: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([image, condition], 1))


class RandomFeatureExtractor(nn.Module):
    """Frozen 4-stage strided conv stack with seed-fixed random weights."""

    def __init__(self, seed: int = 0, widths=(16, 32, 64, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages, c_in = [], 3
        for w in widths:
            conv = nn.Conv2d(c_in, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (c_in * 9)))
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.ReLU()))
            c_in = w
        self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for s in self.stages:
            x = s(x)
            feats.append(x)
        return feats


def gram(f: torch.Tensor) -> torch.Tensor:
    b, c, h, w = f.shape
    f = f.reshape(b, c, h * w)
    return f @ f.transpose(1, 2) / (c * h * w)


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, extractor: Callable) -> torch.Tensor:
    """Sum over stages of feature L1 plus Gram-matrix L1."""
    total = a.new_zeros(())
    for fa, fb in zip(extractor(a), extractor(b)):
        total = total + (fa - fb).abs().mean() + (gram(fa) - gram(fb)).abs().mean()
    return total


def combine_renderer_loss(l1, perc, gan, lambda_l1: float = 1.0, lambda_perc: float = 1.0,
                          lambda_gan: float = 0.01):
    return lambda_l1 * l1 + lambda_perc * perc + lambda_gan * gan


def renderer_loss(gen, real, d_fake=None, extractor: Callable | None = None, lambda_l1: float = 1.0,
                  lambda_perc: float = 1.0, lambda_gan: float = 0.01):
    """Weighted L1 + perceptual + LSGAN generator term, with the parts for logging.

    ``gen``/``real`` are ``(B, 3, H, W)``; ``d_fake`` are patch scores on the
    generated frames (``None`` drops the adversarial term).
    """
    l1 = (gen - real).abs().mean()
    perc = perceptual_loss(gen, real, extractor) if extractor is not None else l1.new_zeros(())
    gan = lsgan_losses(torch.ones(()), d_fake)[0] if d_fake is not None else l1.new_zeros(())
    total = combine_renderer_loss(l1, perc, gan, lambda_l1, lambda_perc, lambda_gan)
    return total, {"l1": l1, "perc": perc, "gan": gan, "total": total}


# --------------------------------------------------------------------------
# Full model
# --------------------------------------------------------------------------


@dataclass
class FrameInputs:
    """Everything the renderer needs for one target frame."""

    uv: torch.Tensor  # (H, W, 2)
    alpha: torch.Tensor  # (H, W)
    neighbor_uvs: list[torch.Tensor]  # W_R x (H, W, 2), order of neighbor_offsets
    real: torch.Tensor  # (H, W, 3) frame supplying the background
    window: torch.Tensor  # (2W, n_phonemes)


@dataclass
class RenderOutput:
    frame: torch.Tensor  # (H, W, 3) composited
    raw: torch.Tensor  # (H, W, 3) network output before compositing
    alpha_exp: torch.Tensor


class NeuralRenderer(nn.Module):
    def __init__(self, cfg: RendererConfig):
        super().__init__()
        self.cfg = cfg
        self.audio = AudioEncoder(cfg.W, cfg.n_phonemes, cfg.N_a, cfg.audio_hidden)
        self.texture = TextureNetwork(cfg.N_a, cfg.texture_hidden, cfg.texture_layers, cfg.omega0,
                                      audio_gain=cfg.audio_init_gain)
        self.renderer = RendererNetwork(cfg.in_channels, cfg.unet_base, cfg.unet_depth)

    @property
    def layout(self) -> list[str]:
        return channel_layout(self.cfg.W_R)

    def encode(self, windows: torch.Tensor) -> torch.Tensor:
        p = next(self.parameters())
        if not self.cfg.audio_texture:
            return torch.zeros(windows.shape[:-2] + (self.cfg.N_a,), dtype=p.dtype)
        return self.audio(windows.to(p.dtype))

    def assemble(self, f: FrameInputs, a_enc: torch.Tensor, d: int):
        """Renderer input ``(H, W, C)`` and the grown mask for one frame."""
        alpha_exp = expand_mask(f.alpha, d)
        tex = texture_raster(self.texture, f.uv, f.alpha, a_enc)
        blended = blend(tex[..., :3], f.real.to(tex.dtype), f.alpha, alpha_exp)
        return assemble_renderer_input(tex, f.neighbor_uvs, blended, self.cfg.W_R), alpha_exp, blended

    def forward(self, frames: Sequence[FrameInputs]) -> list[RenderOutput]:
        if not frames:
            return []
        d = self.cfg.dilation(frames[0].alpha.shape[0])
        a_enc = self.encode(torch.stack([torch.as_tensor(f.window) for f in frames]))
        built = [self.assemble(f, a_enc[i], d) for i, f in enumerate(frames)]
        x = torch.stack([b[0] for b in built]).permute(0, 3, 1, 2)
        raw = self.renderer(x).permute(0, 2, 3, 1)
        out = []
        for i, f in enumerate(frames):
            inside = built[i][1] > 0.5
            # composite at the wider precision so background pixels pass through untouched
            dtype = torch.promote_types(raw.dtype, f.real.dtype)
            frame = torch.where(inside[..., None], raw[i].to(dtype), f.real.to(dtype))
            out.append(RenderOutput(frame, raw[i], built[i][1]))
        return out


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


@dataclass
class RendererClip:
    """Rasterized UVs and masks of a tracked clip with its real frames and 60 fps phoneme stream."""

    uv: np.ndarray  # (n, H, W, 2)
    alpha: np.ndarray  # (n, H, W)
    frames: np.ndarray  # (n, H, W, 3)
    phonemes: np.ndarray  # (T60, n_phonemes)
    name: str = ""

    def __post_init__(self):
        n = self.uv.shape[0]
        if self.alpha.shape[0] != n or self.frames.shape[0] != n:
            raise RendererError("uv, alpha and frames must have the same number of frames")

    def __len__(self):
        return self.uv.shape[0]

    def frame_inputs(self, t: int, cfg: RendererConfig, real=None) -> FrameInputs:
        n = len(self)
        idx = [min(max(t + o, 0), n - 1) for o in neighbor_offsets(cfg.W_R)]
        real = self.frames[t] if real is None else real
        return FrameInputs(torch.as_tensor(self.uv[t]), torch.as_tensor(self.alpha[t]),
                           [torch.as_tensor(self.uv[i]) for i in idx], torch.as_tensor(real),
                           torch.as_tensor(audio_window(self.phonemes, t, cfg.W)))


def rasterize_track(model, pi_fix: dict, pi_var: Sequence[dict], resolution: int):
    """UV images and coverage masks for every frame of a parameter track."""
    from .face_model import default_scene, rasterize

    base = default_scene(model, resolution)
    uvs, alphas = [], []
    with torch.no_grad():
        for p in pi_var:
            scene = base.replace(shape=torch.as_tensor(pi_fix["shape"]), K=torch.as_tensor(pi_fix["K"]),
                                 joints=torch.as_tensor(p["joints"]), expr=torch.as_tensor(p["expr"]),
                                 R=torch.as_tensor(p["R"]), t=torch.as_tensor(p["t"]))
            buf = rasterize(model, scene, resolution)
            uvs.append(buf.uv_image.numpy())
            alphas.append(buf.alpha.numpy())
    return np.stack(uvs), np.stack(alphas)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class RendererTrainResult:
    model: NeuralRenderer
    discriminator: PatchDiscriminator
    curves: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def epoch_losses(self, epoch: int) -> list[dict]:
        return [c for c in self.curves if c["epoch"] == epoch]


def _renderer_meta(cfg: RendererConfig, **extra) -> dict:
    layout = channel_layout(cfg.W_R)
    return {"kind": "renderer", "config": asdict(cfg), "layout": layout, "layout_hash": layout_hash(layout),
            "W": cfg.W, "W_R": cfg.W_R, "N_a": cfg.N_a, "dilation_at_256": cfg.dilation_at_256, **extra}


def save_renderer(path, model: NeuralRenderer, disc: PatchDiscriminator | None = None,
                  optimizers=None, **extra) -> Path:
    arrays = module_arrays("renderer", model)
    meta = _renderer_meta(model.cfg, **extra)
    if disc is not None:
        arrays.update(module_arrays("disc", disc))
    if optimizers is not None:
        for name, opt in optimizers.items():
            a, groups = optimizer_arrays(name, opt)
            arrays.update(a)
            meta[f"{name}_groups"] = groups
    return save_checkpoint(path, arrays, meta)


def load_renderer(path, layout: Sequence[str] | None = None) -> NeuralRenderer:
    """Load a renderer; ``layout`` (if given) must match the recorded channel order."""
    arrays, meta = load_checkpoint(path, kind="renderer")
    cfg = RendererConfig(**meta["config"])
    expected = layout_hash(channel_layout(cfg.W_R))
    if meta.get("layout_hash") != expected:
        raise CheckpointError("renderer checkpoint channel layout does not match this build")
    if layout is not None and layout_hash(list(layout)) != meta["layout_hash"]:
        raise CheckpointError("input channel layout differs from the one the renderer was trained with")
    model = NeuralRenderer(cfg)
    load_module("renderer", model, arrays)
    model.eval()
    return model


def train_renderer(clips: Sequence[RendererClip], cfg: RendererConfig, seed: int, out_dir=None,
                   resume=None, extractor: Callable | None = None,
                   dtype=torch.float32) -> RendererTrainResult:
    """Joint Adam training of audio encoder, texture network, U-Net and patch discriminator.

    Each epoch visits every frame once in an order drawn from
    ``default_rng([seed, epoch])``.  The loss is computed on the composited
    frame, so only pixels inside the grown mask carry gradient.
    """
    torch.manual_seed(seed)
    model = NeuralRenderer(cfg).to(dtype)
    disc = PatchDiscriminator(6, cfg.disc_base).to(dtype)
    extractor = extractor if extractor is not None else RandomFeatureExtractor(seed=0).to(dtype)
    opt_g = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr)
    start_epoch = 0
    if resume is not None:
        arrays, meta = load_checkpoint(resume, kind="renderer")
        load_module("renderer", model, arrays)
        load_module("disc", disc, arrays)
        load_optimizer("opt_gen", opt_g, arrays, meta["opt_gen_groups"])
        load_optimizer("opt_disc", opt_d, arrays, meta["opt_disc_groups"])
        start_epoch = meta["epoch"] + 1
    items = [(c, t) for c in range(len(clips)) for t in range(len(clips[c]))]
    if not items:
        raise TrainingError("no training frames")

    out_dir = Path(out_dir) if out_dir is not None else None
    result = RendererTrainResult(model, disc)
    last_ckpt = Path(resume) if resume is not None else None
    use_gan = cfg.lambda_gan > 0
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(items))
        for step, s in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [clips[items[i][0]].frame_inputs(items[i][1], cfg) for i in order[s:s + cfg.batch_size]]
            outs = model(batch)
            fake = torch.stack([o.frame for o in outs]).to(dtype).permute(0, 3, 1, 2)
            real = torch.stack([b.real for b in batch]).to(dtype).permute(0, 3, 1, 2)
            cond = torch.stack([torch.where(o.alpha_exp[..., None] > 0.5, 0.0, b.real.to(dtype))
                                for o, b in zip(outs, batch)]).permute(0, 3, 1, 2)
            disc_loss = torch.zeros((), dtype=dtype)
            if use_gan:
                _, disc_loss = lsgan_losses(disc(real, cond), disc(fake.detach(), cond))
                opt_d.zero_grad()
                disc_loss.backward()
                opt_d.step()
            d_fake = disc(fake, cond) if use_gan else None
            total, parts = renderer_loss(fake, real, d_fake, extractor, cfg.lambda_l1, cfg.lambda_perc,
                                         cfg.lambda_gan)
            if not (torch.isfinite(total) and torch.isfinite(disc_loss)):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}", last_ckpt)
            opt_g.zero_grad()
            total.backward()
            opt_g.step()
            result.curves.append({"epoch": epoch, "step": step, **{k: v.item() for k, v in parts.items()},
                                  "disc": disc_loss.item()})
        if out_dir is not None:
            last_ckpt = save_renderer(out_dir / f"renderer_epoch{epoch:03d}.ckpt", model, disc,
                                      {"opt_gen": opt_g, "opt_disc": opt_d}, epoch=epoch, seed=seed)
            result.checkpoints.append(last_ckpt)
        rows = result.epoch_losses(epoch)
        log.info("renderer epoch %d: total=%.4g l1=%.4g", epoch, np.mean([r["total"] for r in rows]),
                 np.mean([r["l1"] for r in rows]))
    model.eval()
    return result


@torch.no_grad()
def render_clip(model: NeuralRenderer, clip: RendererClip, backgrounds=None, batch_size: int = 8) -> np.ndarray:
    """Render every frame of ``clip``; ``backgrounds`` (n, H, W, 3) default to ``clip.frames``."""
    out = []
    for s in range(0, len(clip), batch_size):
        frames = [clip.frame_inputs(t, model.cfg, None if backgrounds is None else backgrounds[t])
                  for t in range(s, min(s + batch_size, len(clip)))]
        out += [o.frame.numpy() for o in model(frames)]
    return np.stack(out)


def write_curves(path, curves: list[dict]) -> None:
    if not curves:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(curves[0]))
        w.writeheader()
        w.writerows(curves)
