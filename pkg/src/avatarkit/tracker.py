"""Analysis-by-synthesis monocular tracking.

Subject-constant parameters (texture, lighting, intrinsics, plus shape) are
fitted once on a handful of frames; pose, joints and expression are then
fitted frame by frame with warm starts from the previous frame.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .face_model import (BlendshapeModel, SceneParameters, axis_angle_to_matrix, default_scene,
                         matrix_to_axis_angle, rasterize, render_textured, texture_from_coeffs)

log = logging.getLogger(__name__)

TRACK_FORMAT_VERSION = "1.0.0"


class TrackingError(RuntimeError):
    pass


class DegeneratePoseError(TrackingError):
    """The rendered face covers no pixel of the frame."""


@dataclass
class TrackingPriors:
    weights: dict[str, float] = field(default_factory=lambda: {
        "shape": 1e-3, "tex": 1e-3, "expr": 1e-4, "joints": 1e-4})
    means: dict[str, np.ndarray] = field(default_factory=dict)
    scales: dict[str, np.ndarray] = field(default_factory=dict)
    t_mean: tuple[float, float, float] = (0.0, 0.0, 3.0)

    def __post_init__(self):
        for k, w in self.weights.items():
            if w < 0:
                raise ValueError(f"prior weight for {k} must be >= 0")

    def prior_term(self, scene: SceneParameters) -> torch.Tensor:
        total = torch.zeros((), dtype=scene.expr.dtype)
        for group, w in self.weights.items():
            x = getattr(scene, group)
            mean = torch.as_tensor(self.means.get(group, 0.0), dtype=x.dtype)
            scale = torch.as_tensor(self.scales.get(group, 1.0), dtype=x.dtype)
            total = total + w * (((x - mean) / scale) ** 2).sum()
        return total

    def initial_variable(self, model: BlendshapeModel, dtype=torch.float64) -> dict[str, torch.Tensor]:
        def mean(group, n):
            return torch.as_tensor(self.means.get(group, np.zeros(n)), dtype=dtype).reshape(-1).clone()

        return {"joints": mean("joints", model.n_joints * 3).reshape(model.n_joints, 3),
                "expr": mean("expr", model.n_expr),
                "R": torch.eye(3, dtype=dtype),
                "t": torch.tensor(self.t_mean, dtype=dtype)}


@dataclass
class TrackerConfig:
    lr: float = 1e-2
    fixed_iters: int = 200
    frame_iters: int = 50
    first_frame_iters: int = 200
    photometric_tol: float = 1e-5
    lr_decay: float = 0.98
    min_lr: float = 1e-6
    n_fixed_frames: int = 4
    # frames whose photometric term is still above refine_above get up to refine_iters more steps
    refine_above: float = 1e-3
    refine_iters: int = 150
    # per-group multipliers on lr; pose and joints move pixels far more per unit than blendshapes
    group_scale: dict[str, float] = field(default_factory=lambda: {
        "expr": 1.0, "tex": 1.0, "light": 1.0, "shape": 1.0, "joints": 0.2, "pose": 0.2, "K": 0.2})


@dataclass
class TrackResult:
    pi_fix: dict[str, np.ndarray]
    pi_var: list[dict[str, np.ndarray]]
    losses: np.ndarray
    converged: np.ndarray

    def __post_init__(self):
        if len(self.pi_var) != len(self.losses) or len(self.losses) != len(self.converged):
            raise ValueError("per-frame arrays disagree in length")

    def __len__(self):
        return len(self.pi_var)

    def stacked(self, key: str) -> np.ndarray:
        if not self.pi_var:
            return np.zeros((0,))
        return np.stack([p[key] for p in self.pi_var])

    def scene(self, model: BlendshapeModel, frame: int, dtype=torch.float64) -> SceneParameters:
        return scene_from(self.pi_fix, self.pi_var[frame], model, dtype)


def _check_not_blank(frame: torch.Tensor, index: int | None = None) -> None:
    if float(frame.abs().max()) == 0.0:
        where = f"frame {index}" if index is not None else "frame"
        raise DegeneratePoseError(f"{where} is entirely black; there is no face to fit")


def scene_from(pi_fix: dict, pi_var: dict, model: BlendshapeModel, dtype=torch.float64) -> SceneParameters:
    def t(x):
        return torch.as_tensor(np.asarray(x), dtype=dtype)

    return SceneParameters(
        tex=t(pi_fix["tex"]), shape=t(pi_fix.get("shape", np.zeros(model.n_shape))),
        light=t(pi_fix["light"]), K=t(pi_fix["K"]),
        joints=t(pi_var["joints"]), expr=t(pi_var["expr"]), R=t(pi_var["R"]), t=t(pi_var["t"]))


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def photometric_terms(frame, scene: SceneParameters, model: BlendshapeModel,
                      priors: TrackingPriors | None = None):
    """``(total, photometric, prior)`` for one frame.

    The photometric term is the mean absolute RGB difference over pixels the
    rendered face covers.
    """
    frame = torch.as_tensor(frame)
    h, w = frame.shape[:2]
    buffers = rasterize(model, scene, (h, w))
    if float(buffers.alpha.sum()) == 0:
        raise DegeneratePoseError("rendered face covers no pixels; pose is degenerate")
    tex = texture_from_coeffs(model, scene.tex, buffers.uv_image.dtype)
    img = render_textured(buffers, tex, scene.light)
    ys, xs = buffers.covered()
    photo = (img[ys, xs] - frame[ys, xs].to(img.dtype)).abs().mean()
    prior = priors.prior_term(scene) if priors is not None else torch.zeros((), dtype=photo.dtype)
    return photo + prior, photo, prior


def photometric_loss(frame, scene: SceneParameters, model: BlendshapeModel,
                     priors: TrackingPriors | None = None) -> torch.Tensor:
    return photometric_terms(frame, scene, model, priors)[0]


# --------------------------------------------------------------------------
# Optimization
# --------------------------------------------------------------------------


@dataclass
class _Outcome:
    loss: float
    photometric: float
    converged: bool
    history: list[float]


def _minimize(groups: dict[str, list[torch.Tensor]], objective, iters: int, cfg: TrackerConfig) -> _Outcome:
    """Adam under a bold-driver rate policy, keeping the best iterate.

    Hard coverage makes the loss piecewise discontinuous, so every step is
    taken but only improvements are accepted into the incumbent; a step that
    raises the loss shrinks the rate by ``cfg.lr_decay``.  ``objective()``
    returns ``(total, photometric)`` as tensors.
    """
    params = [p for ps in groups.values() for p in ps]
    scales = [cfg.group_scale.get(name, 1.0) for name in groups]
    opt = torch.optim.Adam([{"params": ps, "lr": cfg.lr * sc} for ps, sc in zip(groups.values(), scales)])

    def evaluate():
        opt.zero_grad()
        total, photo = objective()
        if not torch.isfinite(total):
            raise TrackingError(f"non-finite tracking loss ({float(total)}); "
                                f"check frame values and initial pose")
        total.backward()
        return total.item(), photo.item()

    loss, photo = evaluate()
    history = [loss]
    best = [p.detach().clone() for p in params]
    lr = cfg.lr
    current = loss
    converged = photo <= cfg.photometric_tol
    for _ in range(iters):
        if converged:
            break
        opt.step()
        new_loss, new_photo = evaluate()
        if new_loss < loss:
            loss, photo = new_loss, new_photo
            history.append(loss)
            best = [p.detach().clone() for p in params]
            converged = photo <= cfg.photometric_tol
        if new_loss > current:
            lr *= cfg.lr_decay
            for group, sc in zip(opt.param_groups, scales):
                group["lr"] = lr * sc
            if lr < cfg.min_lr:
                converged = True
        current = new_loss
    with torch.no_grad():
        for p, b in zip(params, best):
            p.copy_(b)
    return _Outcome(loss, photo, converged, history)


def fit_fixed(frames, model: BlendshapeModel, priors: TrackingPriors | None = None,
              cfg: TrackerConfig | None = None, init: SceneParameters | None = None,
              init_variable: list[dict] | None = None):
    """Fit texture, lighting, intrinsics (and shape) on a sample of frames.

    Per-frame pose and expression are optimized alongside as nuisance
    variables and discarded.  Returns ``(pi_fix, converged, loss)``.
    """
    priors = priors or TrackingPriors()
    cfg = cfg or TrackerConfig()
    frames = [torch.as_tensor(np.asarray(f), dtype=torch.float64) for f in frames]
    if not frames:
        raise ValueError("fit_fixed needs at least one frame")
    for i, f in enumerate(frames):
        _check_not_blank(f, i)
    h, w = frames[0].shape[:2]
    base = init.to(torch.float64) if init is not None else default_scene(model, (h, w))
    tex = base.tex.detach().clone().requires_grad_()
    shape = base.shape.detach().clone().requires_grad_()
    light = base.light.detach().clone().requires_grad_()
    # log focal lengths and principal point, both relative to the image width
    K0 = base.K.detach()
    kvec = torch.stack([torch.log(K0[0, 0] / w), torch.log(K0[1, 1] / w), K0[0, 2] / w, K0[1, 2] / w])
    kvec = kvec.clone().requires_grad_()
    var = []
    for i in range(len(frames)):
        v0 = init_variable[i] if init_variable is not None else priors.initial_variable(model)
        var.append({
            "joints": torch.as_tensor(np.asarray(v0["joints"]), dtype=torch.float64).clone().requires_grad_(),
            "expr": torch.as_tensor(np.asarray(v0["expr"]), dtype=torch.float64).clone().requires_grad_(),
            "rvec": matrix_to_axis_angle(torch.as_tensor(np.asarray(v0["R"]))).clone().requires_grad_(),
            "t": torch.as_tensor(np.asarray(v0["t"]), dtype=torch.float64).clone().requires_grad_(),
        })

    def K_of(kv):
        zero = torch.zeros((), dtype=kv.dtype)
        one = torch.ones((), dtype=kv.dtype)
        fx, fy = w * torch.exp(kv[0]), w * torch.exp(kv[1])
        return torch.stack([torch.stack([fx, zero, w * kv[2]]), torch.stack([zero, fy, w * kv[3]]),
                            torch.stack([zero, zero, one])])

    def objective():
        total = photo = 0.0
        K = K_of(kvec)
        for f, v in zip(frames, var):
            scene = SceneParameters(tex=tex, shape=shape, joints=v["joints"], expr=v["expr"], light=light,
                                    R=axis_angle_to_matrix(v["rvec"]), t=v["t"], K=K)
            tt, pp, _ = photometric_terms(f, scene, model, priors)
            total = total + tt
            photo = photo + pp
        n = len(frames)
        return total / n, photo / n

    groups = {"tex": [tex], "shape": [shape], "light": [light], "K": [kvec],
              "expr": [v["expr"] for v in var], "joints": [v["joints"] for v in var],
              "pose": [p for v in var for p in (v["rvec"], v["t"])]}
    out = _minimize(groups, objective, cfg.fixed_iters, cfg)
    if not out.converged:
        log.warning("fixed-parameter fit did not converge in %d iterations (loss %.3g)",
                    cfg.fixed_iters, out.loss)
    pi_fix = {"tex": tex.detach().numpy().copy(), "shape": shape.detach().numpy().copy(),
              "light": light.detach().numpy().copy(), "K": K_of(kvec).detach().numpy().copy()}
    return pi_fix, out.converged, out.loss


def fit_frame(frame, model: BlendshapeModel, pi_fix: dict, init: dict, priors: TrackingPriors,
              cfg: TrackerConfig, iters: int):
    frame = torch.as_tensor(np.asarray(frame), dtype=torch.float64)
    _check_not_blank(frame)
    fixed = {k: torch.as_tensor(np.asarray(v), dtype=torch.float64) for k, v in pi_fix.items()}
    shape = fixed.get("shape", torch.zeros(model.n_shape, dtype=torch.float64))
    joints = torch.as_tensor(np.asarray(init["joints"]), dtype=torch.float64).clone().requires_grad_()
    expr = torch.as_tensor(np.asarray(init["expr"]), dtype=torch.float64).clone().requires_grad_()
    rvec = matrix_to_axis_angle(torch.as_tensor(np.asarray(init["R"]))).clone().requires_grad_()
    t = torch.as_tensor(np.asarray(init["t"]), dtype=torch.float64).clone().requires_grad_()

    def objective():
        scene = SceneParameters(tex=fixed["tex"], shape=shape, joints=joints, expr=expr,
                                light=fixed["light"], R=axis_angle_to_matrix(rvec), t=t, K=fixed["K"])
        total, photo, _ = photometric_terms(frame, scene, model, priors)
        return total, photo

    out = _minimize({"expr": [expr], "joints": [joints], "pose": [rvec, t]}, objective, iters, cfg)
    result = {"joints": joints.detach().numpy().copy(), "expr": expr.detach().numpy().copy(),
              "R": axis_angle_to_matrix(rvec.detach()).numpy().copy(), "t": t.detach().numpy().copy()}
    return result, out


def fit_sequence(frames, model: BlendshapeModel, pi_fix: dict, priors: TrackingPriors | None = None,
                 cfg: TrackerConfig | None = None, init: dict | None = None) -> TrackResult:
    """Per-frame fit of joints, expression and pose with ``pi_fix`` held constant.

    Frame 0 starts from the priors' means (or ``init``); every later frame
    starts from its predecessor's solution.  Non-converged frames are flagged
    and tracking continues.
    """
    priors = priors or TrackingPriors()
    cfg = cfg or TrackerConfig()
    state = init or {k: v.numpy() for k, v in priors.initial_variable(model).items()}
    pi_var, losses, flags = [], [], []
    for i, frame in enumerate(frames):
        iters = cfg.first_frame_iters if i == 0 else cfg.frame_iters
        state, out = fit_frame(frame, model, pi_fix, state, priors, cfg, iters)
        if out.photometric > cfg.refine_above and cfg.refine_iters > 0:
            state, extra = fit_frame(frame, model, pi_fix, state, priors, cfg, cfg.refine_iters)
            out = _Outcome(extra.loss, extra.photometric, extra.converged, out.history + extra.history[1:])
        pi_var.append(state)
        losses.append(out.photometric)
        flags.append(out.converged)
        if not out.converged:
            log.info("frame %d did not converge (photometric %.3g)", i, out.photometric)
    return TrackResult({k: np.asarray(v) for k, v in pi_fix.items()}, pi_var,
                       np.asarray(losses, dtype=np.float64), np.asarray(flags, dtype=bool))


# --------------------------------------------------------------------------
# File format
# --------------------------------------------------------------------------


def save_track(path, result: TrackResult) -> None:
    arrays = {f"pi_fix/{k}": v for k, v in result.pi_fix.items()}
    for key in ("joints", "expr", "R", "t"):
        arrays[f"pi_var/{key}"] = result.stacked(key)
    arrays["losses"] = result.losses
    arrays["converged"] = result.converged
    with open(path, "wb") as fh:
        np.savez(fh, version=np.array(TRACK_FORMAT_VERSION), **arrays)


def load_track(path) -> TrackResult:
    with np.load(path, allow_pickle=False) as z:
        if str(z["version"]).split(".")[0] != TRACK_FORMAT_VERSION.split(".")[0]:
            raise TrackingError(f"unsupported track file version {z['version']}")
        pi_fix = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("pi_fix/")}
        var = {k: z[f"pi_var/{k}"] for k in ("joints", "expr", "R", "t")}
        n = len(z["losses"])
        pi_var = [{k: var[k][i] for k in var} for i in range(n)]
        return TrackResult(pi_fix, pi_var, z["losses"], z["converged"])
