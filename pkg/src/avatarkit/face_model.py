"""Blendshape face model, perspective camera, SH lighting and a z-buffer rasterizer.

Coordinate conventions
----------------------
Model and camera space are right-handed with x right, y down and z pointing
away from the camera, so the default head pose is ``R = I`` with the face
looking towards ``-z``.  Pixel ``(row i, col j)`` has its centre at image
coordinates ``(x, y) = (j + 0.5, i + 0.5)``.

UV coordinates have their origin at the bottom-left of the texture with ``v``
pointing up; texture arrays are stored top row first, so ``v = 1`` is row 0.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import ConvexHull

MODEL_FORMAT_VERSION = "1.0.0"

# Real spherical harmonics, bands 0-2, ordered (l, m) with m = -l..l.
SH_C0 = 0.5 * math.sqrt(1.0 / math.pi)
SH_C1 = math.sqrt(3.0 / (4.0 * math.pi))
SH_C2 = 0.5 * math.sqrt(15.0 / math.pi)
SH_C2_0 = 0.25 * math.sqrt(5.0 / math.pi)
SH_C2_2 = 0.25 * math.sqrt(15.0 / math.pi)

DEPTH_EPS = 1e-6


class ModelError(ValueError):
    """Raised for malformed models, parameters or inputs to the face model."""


# --------------------------------------------------------------------------
# Data containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelDims:
    n_vertices: int = 162
    n_shape: int = 4
    n_expr: int = 8
    n_joints: int = 2
    n_tex: int = 4
    texture_res: int = 64

    @classmethod
    def desk(cls) -> "ModelDims":
        return cls()

    @classmethod
    def flame(cls, texture_res: int = 256) -> "ModelDims":
        # global, neck, jaw and both eyeballs; 300 shape / 100 expression PCs
        return cls(n_vertices=5023, n_shape=300, n_expr=100, n_joints=5, n_tex=50,
                   texture_res=texture_res)


@dataclass(frozen=True, eq=False)
class BlendshapeModel:
    """Linear shape/expression blendshapes on a template, skinned by a joint tree."""

    template: np.ndarray  # (V, 3)
    shape_basis: np.ndarray  # (S, V, 3)
    expression_basis: np.ndarray  # (E, V, 3)
    joint_centers: np.ndarray  # (J, 3)
    joint_parents: np.ndarray  # (J,), -1 for the root
    skin_weights: np.ndarray  # (V, J)
    triangles: np.ndarray  # (F, 3)
    uvs: np.ndarray  # (V, 2)
    texture_mean: np.ndarray  # (Ht, Wt, 3)
    texture_basis: np.ndarray  # (A, Ht, Wt, 3)
    expression_names: tuple[str, ...] = ()
    joint_names: tuple[str, ...] = ()
    version: str = MODEL_FORMAT_VERSION

    def __post_init__(self):
        v = self.template.shape[0]
        if self.template.ndim != 2 or self.template.shape[1] != 3:
            raise ModelError(f"template must be (V, 3), got {self.template.shape}")
        for name in ("shape_basis", "expression_basis"):
            b = getattr(self, name)
            if b.ndim != 3 or b.shape[1:] != (v, 3):
                raise ModelError(f"{name} must be (n, {v}, 3), got {b.shape}")
        j = self.joint_centers.shape[0]
        if self.skin_weights.shape != (v, j):
            raise ModelError(f"skin_weights must be ({v}, {j}), got {self.skin_weights.shape}")
        if not np.allclose(self.skin_weights.sum(axis=1), 1.0, atol=1e-6):
            raise ModelError("skinning weights must sum to 1 per vertex")
        if self.joint_parents.shape != (j,):
            raise ModelError("joint_parents must have one entry per joint")
        for k, p in enumerate(self.joint_parents):
            if not -1 <= p < k:
                raise ModelError("joint parents must precede their children")
        tri = self.triangles
        if tri.size and (tri.ndim != 2 or tri.shape[1] != 3 or tri.min() < 0 or tri.max() >= v):
            raise ModelError("triangle indices out of range")
        if self.uvs.shape != (v, 2) or self.uvs.min() < 0.0 or self.uvs.max() > 1.0:
            raise ModelError("uvs must be (V, 2) inside [0, 1]^2")
        if self.texture_mean.ndim != 3 or self.texture_mean.shape[2] != 3:
            raise ModelError("texture_mean must be (Ht, Wt, 3)")
        if self.texture_basis.shape[1:] != self.texture_mean.shape:
            raise ModelError("texture_basis must be (A, Ht, Wt, 3)")

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def n_expr(self) -> int:
        return self.expression_basis.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_centers.shape[0]

    @property
    def n_tex(self) -> int:
        return self.texture_basis.shape[0]

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.n_vertices, self.n_shape, self.n_expr, self.n_joints,
                         self.n_tex, self.texture_mean.shape[0])

    def tensor(self, name: str, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(getattr(self, name), dtype=dtype)


@dataclass
class SceneParameters:
    """Full per-frame scene state.

    ``tex``, ``light`` and ``K`` are the per-subject fixed part; ``joints``,
    ``expr``, ``R`` and ``t`` vary per frame.  ``shape`` is held fixed by the
    tracker as well but is not part of either split.
    """

    tex: torch.Tensor  # (A,)
    shape: torch.Tensor  # (S,)
    joints: torch.Tensor  # (J, 3) axis-angle, radians
    expr: torch.Tensor  # (E,)
    light: torch.Tensor  # (3, 9)
    R: torch.Tensor  # (3, 3)
    t: torch.Tensor  # (3,)
    K: torch.Tensor  # (3, 3)

    FIXED = ("tex", "light", "K")
    VARIABLE = ("joints", "expr", "R", "t")

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, torch.as_tensor(getattr(self, f.name)))

    def validate(self, model: BlendshapeModel | None = None) -> None:
        R = self.R.detach().double()
        if R.shape != (3, 3):
            raise ModelError("R must be 3x3")
        if not torch.allclose(R @ R.T, torch.eye(3, dtype=R.dtype), atol=1e-6) or \
                abs(float(torch.det(R)) - 1.0) > 1e-6:
            raise ModelError("R must be a proper rotation")
        K = self.K.detach()
        if K.shape != (3, 3) or K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ModelError("K must be upper triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ModelError("K must have positive focal lengths")
        if self.light.shape != (3, 9):
            raise ModelError(f"lighting needs 9 SH coefficients per channel, got {tuple(self.light.shape)}")
        if model is not None:
            _check_len("tex", self.tex, model.n_tex)
            _check_len("shape", self.shape, model.n_shape)
            _check_len("expr", self.expr, model.n_expr)
            if self.joints.shape != (model.n_joints, 3):
                raise ModelError(f"joints must be ({model.n_joints}, 3)")

    def fixed(self) -> dict[str, torch.Tensor]:
        return {k: getattr(self, k) for k in self.FIXED}

    def variable(self) -> dict[str, torch.Tensor]:
        return {k: getattr(self, k) for k in self.VARIABLE}

    def replace(self, **kw) -> "SceneParameters":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return SceneParameters(**d)

    def detach(self) -> "SceneParameters":
        return SceneParameters(**{f.name: getattr(self, f.name).detach().clone() for f in fields(self)})

    def to(self, dtype) -> "SceneParameters":
        return SceneParameters(**{f.name: getattr(self, f.name).to(dtype) for f in fields(self)})

    def numpy(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name).detach().cpu().numpy() for f in fields(self)}


@dataclass
class RasterBuffers:
    uv_image: torch.Tensor  # (H, W, 2), 0 outside coverage
    alpha: torch.Tensor  # (H, W)
    depth: torch.Tensor  # (H, W), +inf on background
    normal_image: torch.Tensor | None = None  # (H, W, 3) camera-space unit normals
    face_index: np.ndarray | None = field(default=None, repr=False)  # (H, W), -1 background

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.alpha.shape)

    def covered(self) -> tuple[torch.Tensor, torch.Tensor]:
        ys, xs = torch.nonzero(self.alpha > 0.5, as_tuple=True)
        return ys, xs


def _check_len(name, x, n):
    if x.shape != (n,):
        raise ModelError(f"{name} has shape {tuple(x.shape)}, expected ({n},)")


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------


def axis_angle_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Rotation matrices for axis-angle vectors ``(..., 3)``; smooth at zero."""
    r = torch.as_tensor(r)
    zero = torch.zeros_like(r[..., 0])
    skew = torch.stack([
        torch.stack([zero, -r[..., 2], r[..., 1]], -1),
        torch.stack([r[..., 2], zero, -r[..., 0]], -1),
        torch.stack([-r[..., 1], r[..., 0], zero], -1),
    ], -2)
    return torch.linalg.matrix_exp(skew)


def matrix_to_axis_angle(R: torch.Tensor) -> torch.Tensor:
    R = torch.as_tensor(R, dtype=torch.float64)
    cos = ((torch.diagonal(R, dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0).clamp(-1.0, 1.0)
    angle = torch.arccos(cos)
    axis = torch.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                        R[..., 1, 0] - R[..., 0, 1]], -1)
    s = torch.sin(angle)
    scale = torch.where(s.abs() > 1e-8, angle / (2.0 * s).clamp_min(1e-300), torch.full_like(s, 0.5))
    return axis * scale[..., None]


def evaluate_mesh(model: BlendshapeModel, shape, joints, expr) -> torch.Tensor:
    """Posed vertices ``(V, 3)``: blendshapes added to the template, then skinned."""
    shape, joints, expr = (torch.as_tensor(x) for x in (shape, joints, expr))
    dtype = torch.promote_types(torch.promote_types(shape.dtype, expr.dtype), joints.dtype)
    if not dtype.is_floating_point:
        dtype = torch.float64
    if shape.shape != (model.n_shape,):
        raise ModelError(f"shape coefficients: expected ({model.n_shape},), got {tuple(shape.shape)}")
    if expr.shape != (model.n_expr,):
        raise ModelError(f"expression coefficients: expected ({model.n_expr},), got {tuple(expr.shape)}")
    if joints.shape != (model.n_joints, 3):
        raise ModelError(f"joint rotations: expected ({model.n_joints}, 3), got {tuple(joints.shape)}")

    v = model.tensor("template", dtype)
    v = v + torch.einsum("s,svc->vc", shape.to(dtype), model.tensor("shape_basis", dtype))
    v = v + torch.einsum("e,evc->vc", expr.to(dtype), model.tensor("expression_basis", dtype))

    rots = axis_angle_to_matrix(joints.to(dtype))
    centers = model.tensor("joint_centers", dtype)
    A, b = [], []
    for j, parent in enumerate(model.joint_parents):
        la = rots[j]
        lb = centers[j] - la @ centers[j]
        if parent < 0:
            A.append(la)
            b.append(lb)
        else:
            A.append(A[parent] @ la)
            b.append(A[parent] @ lb + b[parent])
    A = torch.stack(A)
    b = torch.stack(b)
    # blend per-joint displacements rather than positions so the rest pose is exact
    per_joint = torch.einsum("jab,vb->jva", A, v) + b[:, None, :] - v[None]
    w = model.tensor("skin_weights", dtype)
    return v + torch.einsum("vj,jva->va", w, per_joint)


def vertex_normals(vertices: torch.Tensor, triangles: np.ndarray) -> torch.Tensor:
    tri = torch.as_tensor(triangles, dtype=torch.long)
    v0, v1, v2 = vertices[tri[:, 0]], vertices[tri[:, 1]], vertices[tri[:, 2]]
    fn = torch.linalg.cross(v1 - v0, v2 - v0)
    n = torch.zeros_like(vertices)
    for k in range(3):
        n = n.index_add(0, tri[:, k], fn)
    return n / n.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def project(vertices, K, R, t, eps: float = DEPTH_EPS):
    """Full-perspective projection ``p = K (R v + t)`` divided by its third component.

    Returns ``(pixels (N, 2), depth (N,), valid (N,) bool)``.  Points with
    depth <= ``eps`` are flagged invalid and their pixel coordinates are
    computed with a unit stand-in depth, never by dividing by ~0.
    """
    vertices, K, R, t = (torch.as_tensor(x) for x in (vertices, K, R, t))
    cam = vertices @ R.T + t
    p = cam @ K.T
    depth = cam[..., 2]
    valid = depth > eps
    w = torch.where(valid, p[..., 2], torch.ones_like(p[..., 2]))
    pix = p[..., :2] / w[..., None]
    return pix, depth, valid


# --------------------------------------------------------------------------
# Lighting
# --------------------------------------------------------------------------


def sh_basis(normals: torch.Tensor) -> torch.Tensor:
    """The 9 real SH basis functions at unit directions ``(..., 3)``."""
    x, y, z = normals[..., 0], normals[..., 1], normals[..., 2]
    return torch.stack([
        SH_C0 * torch.ones_like(x),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C2_0 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C2_2 * (x * x - y * y),
    ], -1)


def sh_irradiance(normals, gamma) -> torch.Tensor:
    """Per-channel diffuse scale ``Y(n) . gamma``.

    ``normals`` is ``(..., 3)`` and must be unit length; ``gamma`` is ``(C, 9)``
    (or ``(9,)`` for a single channel).  Output is ``(..., C)``.
    """
    normals = torch.as_tensor(normals)
    gamma = torch.as_tensor(gamma)
    if normals.shape[-1] != 3:
        raise ModelError("normals must have 3 components")
    if gamma.shape[-1] != 9:
        raise ModelError("3-band SH lighting needs 9 coefficients per channel")
    norms = normals.detach().norm(dim=-1)
    if norms.numel() and float((norms - 1.0).abs().max()) > 1e-6:
        raise ModelError("sh_irradiance expects unit normals")
    Y = sh_basis(normals)
    if gamma.ndim == 1:
        return Y @ gamma.to(Y.dtype)
    return Y @ gamma.to(Y.dtype).T


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------


def _as_hw(resolution) -> tuple[int, int]:
    if isinstance(resolution, int):
        h = w = resolution
    else:
        h, w = (int(r) for r in resolution)
    if h <= 0 or w <= 0:
        raise ModelError("resolution must be positive")
    return h, w


def _zbuffer(pix: np.ndarray, depth: np.ndarray, valid: np.ndarray, tri: np.ndarray,
             h: int, w: int) -> np.ndarray:
    """Index of the nearest covering triangle per pixel, -1 where uncovered."""
    face_index = np.full(h * w, -1, dtype=np.int64)
    if tri.shape[0] == 0:
        return face_index.reshape(h, w)
    keep = valid[tri].all(axis=1)
    tri_ids = np.nonzero(keep)[0]
    if tri_ids.size == 0:
        return face_index.reshape(h, w)

    zbuf = np.full(h * w, np.inf)
    ys, xs = np.mgrid[0:h, 0:w]
    px = (xs.ravel() + 0.5)[:, None]
    py = (ys.ravel() + 0.5)[:, None]
    chunk = max(1, (1 << 21) // (h * w))
    for s in range(0, tri_ids.size, chunk):
        ids = tri_ids[s:s + chunk]
        a, b, c = (pix[tri[ids, k]] for k in range(3))
        za, zb, zc = (depth[tri[ids, k]] for k in range(3))
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        ok = np.abs(area) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, area, 1.0), 0.0)
        la = ((b[:, 0] - px) * (c[:, 1] - py) - (b[:, 1] - py) * (c[:, 0] - px)) * inv
        lb = ((c[:, 0] - px) * (a[:, 1] - py) - (c[:, 1] - py) * (a[:, 0] - px)) * inv
        lc = 1.0 - la - lb
        inside = (la >= 0) & (lb >= 0) & (lc >= 0) & ok
        inv_z = la / za + lb / zb + lc / zc
        z = np.where(inside, 1.0 / np.where(inside, inv_z, 1.0), np.inf)
        best = np.argmin(z, axis=1)
        zbest = z[np.arange(z.shape[0]), best]
        closer = zbest < zbuf
        zbuf[closer] = zbest[closer]
        face_index[closer] = ids[best[closer]]
    return face_index.reshape(h, w)


def rasterize_mesh(vertices, triangles, uvs, K, R, t, resolution,
                   normals: torch.Tensor | None = None) -> RasterBuffers:
    """Hard z-buffered rasterization with perspective-correct attribute interpolation.

    Coverage is piecewise constant; gradients reach the vertices, camera and
    UVs through the interpolated attributes only.
    """
    h, w = _as_hw(resolution)
    vertices = torch.as_tensor(vertices)
    dtype = vertices.dtype if vertices.dtype.is_floating_point else torch.float64
    vertices = vertices.to(dtype)
    K, R, t = (torch.as_tensor(x).to(dtype) for x in (K, R, t))
    uvs = torch.as_tensor(uvs).to(dtype)
    tri = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)

    pix, depth, valid = project(vertices, K, R, t)
    face_index = _zbuffer(pix.detach().cpu().numpy().astype(np.float64),
                          depth.detach().cpu().numpy().astype(np.float64),
                          valid.detach().cpu().numpy(), tri, h, w)

    alpha = torch.as_tensor(face_index >= 0, dtype=dtype)
    ys_np, xs_np = np.nonzero(face_index >= 0)
    uv_img = torch.zeros(h, w, 2, dtype=dtype)
    depth_img = torch.full((h, w), math.inf, dtype=dtype)
    normal_img = torch.zeros(h, w, 3, dtype=dtype) if normals is not None else None
    if ys_np.size == 0:
        return RasterBuffers(uv_img, alpha, depth_img, normal_img, face_index)

    ys = torch.as_tensor(ys_np)
    xs = torch.as_tensor(xs_np)
    f = torch.as_tensor(tri[face_index[ys_np, xs_np]])
    p = torch.stack([xs.to(dtype) + 0.5, ys.to(dtype) + 0.5], -1)
    a, b, c = pix[f[:, 0]], pix[f[:, 1]], pix[f[:, 2]]

    def cross2(u, v):
        return u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]

    area = cross2(b - a, c - a)
    la = cross2(b - p, c - p) / area
    lb = cross2(c - p, a - p) / area
    lc = 1.0 - la - lb
    za, zb, zc = depth[f[:, 0]], depth[f[:, 1]], depth[f[:, 2]]
    wa, wb, wc = la / za, lb / zb, lc / zc
    inv_z = wa + wb + wc
    wts = torch.stack([wa, wb, wc], -1) / inv_z[:, None]

    def interp(attr):
        return (wts[..., None] * torch.stack([attr[f[:, 0]], attr[f[:, 1]], attr[f[:, 2]]], 1)).sum(1)

    uv_img = uv_img.index_put((ys, xs), interp(uvs))
    depth_img = depth_img.index_put((ys, xs), 1.0 / inv_z)
    if normals is not None:
        n = interp(torch.as_tensor(normals).to(dtype) @ R.T)
        n = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        normal_img = normal_img.index_put((ys, xs), n)
    return RasterBuffers(uv_img, alpha, depth_img, normal_img, face_index)


def rasterize(model: BlendshapeModel, scene: SceneParameters, resolution,
              vertices: torch.Tensor | None = None) -> RasterBuffers:
    """Rasterize the posed model under ``scene``; a fully clipped mesh yields empty buffers."""
    if vertices is None:
        vertices = evaluate_mesh(model, scene.shape, scene.joints, scene.expr)
    normals = vertex_normals(vertices, model.triangles)
    return rasterize_mesh(vertices, model.triangles, model.uvs, scene.K, scene.R, scene.t,
                          resolution, normals=normals)


# --------------------------------------------------------------------------
# Texturing
# --------------------------------------------------------------------------


def texture_from_coeffs(model: BlendshapeModel, tex, dtype=torch.float64) -> torch.Tensor:
    tex = torch.as_tensor(tex).to(dtype)
    _check_len("tex", tex, model.n_tex)
    return model.tensor("texture_mean", dtype) + torch.einsum(
        "a,ahwc->hwc", tex, model.tensor("texture_basis", dtype))


def sample_texture(texture: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of ``texture (Ht, Wt, C)`` at ``uv (N, 2)``; edge-clamped."""
    grid = torch.stack([2.0 * uv[:, 0] - 1.0, 1.0 - 2.0 * uv[:, 1]], -1).to(texture.dtype)
    img = texture.permute(2, 0, 1)[None]
    out = F.grid_sample(img, grid[None, None], mode="bilinear", padding_mode="border",
                        align_corners=False)
    return out[0, :, 0, :].T


def render_textured(buffers: RasterBuffers, texture, gamma) -> torch.Tensor:
    """Shade the textured raster with SH lighting and composite on black; ``(H, W, 3)``."""
    texture = torch.as_tensor(texture)
    gamma = torch.as_tensor(gamma)
    if texture.ndim != 3 or texture.shape[2] != 3:
        raise ModelError("texture must be (Ht, Wt, 3)")
    dtype = torch.promote_types(texture.dtype, buffers.uv_image.dtype)
    h, w = buffers.resolution
    img = torch.zeros(h, w, 3, dtype=dtype)
    ys, xs = buffers.covered()
    if ys.numel() == 0:
        return img
    color = sample_texture(texture.to(dtype), buffers.uv_image[ys, xs])
    if buffers.normal_image is not None:
        color = color * sh_irradiance(buffers.normal_image[ys, xs].to(dtype), gamma.to(dtype))
    return img.index_put((ys, xs), color)


def render(model: BlendshapeModel, scene: SceneParameters, resolution) -> tuple[torch.Tensor, RasterBuffers]:
    buffers = rasterize(model, scene, resolution)
    return render_textured(buffers, texture_from_coeffs(model, scene.tex, buffers.uv_image.dtype),
                           scene.light), buffers


# --------------------------------------------------------------------------
# Model construction
# --------------------------------------------------------------------------


def icosphere(subdivisions: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere; 2 subdivisions give 162 vertices and 320 faces."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), _orient_outward(np.array(verts), np.array(faces, dtype=np.int64))


def fibonacci_sphere(n: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    theta = math.pi * (1.0 + math.sqrt(5.0)) * i
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], -1)
    hull = ConvexHull(pts)
    return pts, _orient_outward(pts, hull.simplices.astype(np.int64))


def _orient_outward(verts, faces):
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a + b + c) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


HEAD_SCALE = np.array([0.78, 1.0, 0.85])
EXPRESSION_NAMES = ("mouth_open", "smile", "pucker", "brow_raise", "brow_furrow",
                    "cheek_puff", "blink_left", "blink_right")
# landmark directions on the unit sphere (x right, y down, -z towards the camera)
LANDMARKS = {
    "mouth": (0.0, 0.42, -0.9),
    "mouth_l": (0.33, 0.38, -0.88),
    "mouth_r": (-0.33, 0.38, -0.88),
    "brow": (0.0, -0.45, -0.89),
    "brow_l": (0.3, -0.45, -0.84),
    "brow_r": (-0.3, -0.45, -0.84),
    "eye_l": (0.3, -0.22, -0.93),
    "eye_r": (-0.3, -0.22, -0.93),
    "cheek_l": (0.55, 0.12, -0.82),
    "cheek_r": (-0.55, 0.12, -0.82),
}


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def landmark_uv(name: str) -> np.ndarray:
    p = _unit(LANDMARKS[name])
    return np.array([(p[0] + 1.0) / 2.0, (1.0 - p[1]) / 2.0])


def _gauss(p, center, sigma):
    d = p - _unit(center)
    return np.exp(-(d * d).sum(-1) / (2.0 * sigma * sigma))[:, None]


def _expression_fields(p: np.ndarray) -> np.ndarray:
    front = (p[:, 2] < 0.2).astype(np.float64)[:, None]
    m = _gauss(p, LANDMARKS["mouth"], 0.3)
    lower = (p[:, 1] >= LANDMARKS["mouth"][1] - 0.05)[:, None]
    fields_ = [
        np.where(lower, 0.16, -0.04) * m * np.array([0.0, 1.0, 0.0]),
        0.12 * (_gauss(p, LANDMARKS["mouth_l"], 0.22) * np.array([0.5, -0.8, 0.0])
                + _gauss(p, LANDMARKS["mouth_r"], 0.22) * np.array([-0.5, -0.8, 0.0])),
        0.14 * m * np.stack([-0.6 * p[:, 0], np.zeros(len(p)), -np.ones(len(p))], -1),
        0.11 * _gauss(p, LANDMARKS["brow"], 0.3) * np.array([0.0, -1.0, 0.0]),
        0.09 * (_gauss(p, LANDMARKS["brow_l"], 0.2) * np.array([-1.0, 0.5, 0.0])
                + _gauss(p, LANDMARKS["brow_r"], 0.2) * np.array([1.0, 0.5, 0.0])),
        0.1 * (_gauss(p, LANDMARKS["cheek_l"], 0.25) + _gauss(p, LANDMARKS["cheek_r"], 0.25)) * p,
        0.09 * _gauss(p, LANDMARKS["eye_l"], 0.2) * np.array([0.0, 1.0, 0.0]),
        0.09 * _gauss(p, LANDMARKS["eye_r"], 0.2) * np.array([0.0, 1.0, 0.0]),
    ]
    return np.stack([f * front for f in fields_])


def _blob(uu, vv, center_uv, su, sv):
    return np.exp(-((uu - center_uv[0]) ** 2) / (2 * su * su) - ((vv - center_uv[1]) ** 2) / (2 * sv * sv))


def head_texture(res: int) -> np.ndarray:
    """Procedural skin texture with smooth facial features; rows run from v=1 down to v=0."""
    c = (np.arange(res) + 0.5) / res
    uu, vv = np.meshgrid(c, c[::-1])
    tex = np.empty((res, res, 3))
    tex[...] = (0.78, 0.58, 0.48)
    tex += 0.07 * np.sin(2 * math.pi * (2 * uu + vv))[..., None] * np.array([1.0, 0.6, 0.3])
    tex += 0.05 * np.cos(2 * math.pi * (3 * vv - uu))[..., None] * np.array([0.2, 0.5, 0.9])
    for eye in ("eye_l", "eye_r"):
        tex -= 0.45 * _blob(uu, vv, landmark_uv(eye), 0.035, 0.025)[..., None]
    for brow in ("brow_l", "brow_r"):
        tex -= 0.3 * _blob(uu, vv, landmark_uv(brow), 0.07, 0.02)[..., None] * np.array([1.0, 1.0, 0.8])
    lips = _blob(uu, vv, landmark_uv("mouth"), 0.11, 0.035)[..., None]
    tex = tex * (1 - lips) + lips * np.array([0.72, 0.25, 0.28])
    return np.clip(tex, 0.0, 1.0)


def make_head_model(subdivisions: int = 2, texture_res: int = 64) -> BlendshapeModel:
    """Desk-scale head proxy: icosphere ellipsoid, 4 shape / 8 expression modes, neck + jaw."""
    p, faces = icosphere(subdivisions)
    template = p * HEAD_SCALE
    shape_basis = np.stack([
        0.1 * p * np.array([1.0, 0.0, 0.0]),
        0.1 * p * np.array([0.0, 1.0, 0.0]),
        0.1 * p * np.array([0.0, 0.0, 1.0]),
        _gauss(p, (0.0, 0.8, -0.6), 0.35) * np.array([0.0, 0.1, -0.05]),
    ])
    expression_basis = _expression_fields(p) * HEAD_SCALE
    joint_centers = np.array([[0.0, 1.0, 0.1], [0.0, 0.05, 0.25]])
    jaw = 1.0 / (1.0 + np.exp(-(template[:, 1] - 0.4) / 0.08))
    jaw *= 1.0 / (1.0 + np.exp(-(0.3 - template[:, 2]) / 0.1))
    skin = np.stack([1.0 - jaw, jaw], -1)
    uvs = np.clip(np.stack([(p[:, 0] + 1.0) / 2.0, (1.0 - p[:, 1]) / 2.0], -1), 0.0, 1.0)

    c = (np.arange(texture_res) + 0.5) / texture_res
    uu, vv = np.meshgrid(c, c[::-1])
    ones = np.ones_like(uu)[..., None]
    texture_basis = np.stack([
        0.05 * ones * np.array([1.0, 1.0, 1.0]),
        0.05 * ones * np.array([1.0, -0.3, -0.3]),
        0.05 * (2 * uu - 1)[..., None] * np.array([1.0, 1.0, 1.0]),
        0.05 * (2 * vv - 1)[..., None] * np.array([0.3, 0.6, 1.0]),
    ])
    return BlendshapeModel(
        template=template, shape_basis=shape_basis, expression_basis=expression_basis,
        joint_centers=joint_centers, joint_parents=np.array([-1, 0]), skin_weights=skin,
        triangles=faces, uvs=uvs, texture_mean=head_texture(texture_res),
        texture_basis=texture_basis, expression_names=EXPRESSION_NAMES,
        joint_names=("neck", "jaw"),
    )


def make_generic_model(dims: ModelDims, seed: int = 0) -> BlendshapeModel:
    """Random-basis model of arbitrary size (e.g. FLAME-sized dims) on a Fibonacci sphere."""
    rng = np.random.default_rng(seed)
    p, faces = fibonacci_sphere(dims.n_vertices)
    v = dims.n_vertices
    joints = dims.n_joints
    w = rng.random((v, joints)) + 1e-3
    w /= w.sum(1, keepdims=True)
    res = dims.texture_res
    return BlendshapeModel(
        template=p * HEAD_SCALE,
        shape_basis=0.01 * rng.standard_normal((dims.n_shape, v, 3)),
        expression_basis=0.01 * rng.standard_normal((dims.n_expr, v, 3)),
        joint_centers=0.2 * rng.standard_normal((joints, 3)),
        joint_parents=np.arange(joints) - 1,
        skin_weights=w, triangles=faces,
        uvs=np.clip(np.stack([(p[:, 0] + 1) / 2, (1 - p[:, 1]) / 2], -1), 0.0, 1.0),
        texture_mean=np.full((res, res, 3), 0.5, dtype=np.float32),
        texture_basis=(0.01 * rng.standard_normal((dims.n_tex, res, res, 3))).astype(np.float32),
        expression_names=tuple(f"expr{i}" for i in range(dims.n_expr)),
        joint_names=tuple(f"joint{i}" for i in range(joints)),
    )


def default_scene(model: BlendshapeModel, resolution, dtype=torch.float64) -> SceneParameters:
    """Neutral pose at a distance that fills roughly 70% of the frame height."""
    h, w = _as_hw(resolution)
    f = float(w)
    K = torch.tensor([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]], dtype=dtype)
    light = torch.zeros(3, 9, dtype=dtype)
    light[:, 0] = 0.85 / SH_C0
    light[:, 2] = -0.25 / SH_C1  # brighter on camera-facing normals
    light[:, 1] = -0.1 / SH_C1  # key light slightly from above
    return SceneParameters(
        tex=torch.zeros(model.n_tex, dtype=dtype), shape=torch.zeros(model.n_shape, dtype=dtype),
        joints=torch.zeros(model.n_joints, 3, dtype=dtype), expr=torch.zeros(model.n_expr, dtype=dtype),
        light=light, R=torch.eye(3, dtype=dtype), t=torch.tensor([0.0, 0.0, 3.0], dtype=dtype), K=K)


# --------------------------------------------------------------------------
# File format
# --------------------------------------------------------------------------

_ARRAY_FIELDS = ("template", "shape_basis", "expression_basis", "joint_centers", "joint_parents",
                 "skin_weights", "triangles", "uvs", "texture_mean", "texture_basis")


def save_model(path, model: BlendshapeModel) -> None:
    meta = {"version": model.version, "expression_names": list(model.expression_names),
            "joint_names": list(model.joint_names), "uv_convention": "origin bottom-left, v up"}
    arrays = {k: getattr(model, k) for k in _ARRAY_FIELDS}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_model(path) -> BlendshapeModel:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        major = meta["version"].split(".")[0]
        if major != MODEL_FORMAT_VERSION.split(".")[0]:
            raise ModelError(f"unsupported model format version {meta['version']}")
        arrays = {k: z[k] for k in _ARRAY_FIELDS}
    return BlendshapeModel(**arrays, expression_names=tuple(meta["expression_names"]),
                           joint_names=tuple(meta["joint_names"]), version=meta["version"])
