"""CPU differentiable Gaussian-splat rasterizer.

Pixel centers sit at integer coordinates. Gaussians are depth sorted once,
then stably binned into 16x16 tiles, so every tile sees its Gaussians front to
back. Kernels run serially, which keeps results bitwise reproducible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .bvh import BVH
from .errors import ShapeMismatch
from .mesh import positions_of
from .texture import AttachedGaussians, WorldGaussians, attached_backward

TILE = 16
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
DEFAULT_DILATION = 0.3
VISIBILITY_DELTA = 1e-3

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792,
         0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


# --------------------------------------------------------------------- camera

@dataclass
class Camera:
    """Pinhole camera; ``R, t`` map world to camera (``p_c = R p + t``), +z forward."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6) or np.linalg.det(self.R) < 0:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "R": self.R.ravel().tolist(),
                "t": self.t.tolist(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), d["R"], d["t"],
                   int(d["width"]), int(d["height"]), float(d.get("near", 0.01)))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fx=128.0, fy=None, width=64, height=64):
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)  # image y points down
        R = np.stack([x, y, z])
        return cls(fx, fx if fy is None else fy, (width - 1) / 2.0, (height - 1) / 2.0, R, -R @ eye,
                   width, height)


def load_cameras(path) -> list:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]


def save_cameras(cameras: Sequence[Camera], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


# ------------------------------------------------------------- spherical harm.

def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real degree-3 SH basis (16 terms) at unit directions ``(N, 3)``."""
    d = np.atleast_2d(dirs)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz, xy, yz, xz = x * x, y * y, z * z, x * y, y * z, x * z
    one = np.ones_like(x)
    return np.stack([
        SH_C0 * one,
        -SH_C1 * y, SH_C1 * z, -SH_C1 * x,
        SH_C2[0] * xy, SH_C2[1] * yz, SH_C2[2] * (2 * zz - xx - yy), SH_C2[3] * xz, SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * xy * z, SH_C3[2] * y * (4 * zz - xx - yy),
        SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy), SH_C3[4] * x * (4 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy), SH_C3[6] * x * (xx - 3 * yy),
    ], axis=1)


def sh_basis_jacobian(dirs: np.ndarray) -> np.ndarray:
    """``d Y_k / d dir``, shape ``(N, 16, 3)``."""
    d = np.atleast_2d(dirs)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    O = np.zeros_like(x)
    J = np.stack([
        np.stack([O, O, O], -1),
        np.stack([O, -SH_C1 + O, O], -1),
        np.stack([O, O, SH_C1 + O], -1),
        np.stack([-SH_C1 + O, O, O], -1),
        np.stack([SH_C2[0] * y, SH_C2[0] * x, O], -1),
        np.stack([O, SH_C2[1] * z, SH_C2[1] * y], -1),
        np.stack([-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z], -1),
        np.stack([SH_C2[3] * z, O, SH_C2[3] * x], -1),
        np.stack([2 * SH_C2[4] * x, -2 * SH_C2[4] * y, O], -1),
        np.stack([SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), O], -1),
        np.stack([SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y], -1),
        np.stack([-2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), 8 * SH_C3[2] * y * z], -1),
        np.stack([-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)], -1),
        np.stack([SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z], -1),
        np.stack([2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)], -1),
        np.stack([SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, O], -1),
    ], axis=1)
    return J


def evaluate_sh(coeffs, view_dir) -> np.ndarray:
    """Color of one Gaussian seen along ``view_dir``; clamped to [0, 1]."""
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(16, 3)
    Y = sh_basis(np.asarray(view_dir, dtype=np.float64))[0]
    return np.clip(Y @ coeffs + 0.5, 0.0, 1.0)


# ------------------------------------------------------------------ projection

CULLED = None  # returned by project_gaussian for culled Gaussians


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities and the intermediates backward needs."""

    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    radii: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    visible: np.ndarray
    p_cam: np.ndarray
    J: np.ndarray
    cov3d: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    color_raw: np.ndarray


def _footprint_m2(opacities):
    # alpha >= ALPHA_MIN  <=>  d^T Q d <= 2 ln(255 o)
    return 2.0 * np.log(np.maximum(opacities, 1e-300) / ALPHA_MIN)


def project(world: WorldGaussians, cam: Camera, dilation: float = DEFAULT_DILATION,
            mask: Optional[np.ndarray] = None) -> Projection:
    n = len(world)
    pc = world.means @ cam.R.T + cam.t
    z = pc[:, 2]
    zs = np.where(np.abs(z) > 1e-12, z, 1e-12)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * pc[:, 0] / zs**2
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * pc[:, 1] / zs**2
    RS = world.rotmats * world.scales[:, None, :]
    cov3d = RS @ np.swapaxes(RS, 1, 2)
    M = J @ cam.R
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2) + dilation * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    okdet = det > 0
    det = np.where(okdet, det, 1.0)
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    m2 = _footprint_m2(world.opacities)
    rx = np.sqrt(np.maximum(m2, 0.0) * np.maximum(a, 0.0))
    ry = np.sqrt(np.maximum(m2, 0.0) * np.maximum(c, 0.0))
    visible = (z > cam.near) & okdet & (m2 > 0)
    visible &= (u + rx >= -0.5) & (u - rx <= cam.width - 0.5) & (v + ry >= -0.5) & (v - ry <= cam.height - 0.5)
    visible &= np.isfinite(u) & np.isfinite(v)
    if mask is not None:
        visible &= np.asarray(mask, dtype=bool)
    dvec = world.means - cam.center
    dist = np.linalg.norm(dvec, axis=1)
    dirs = dvec / np.maximum(dist, 1e-300)[:, None]
    raw = np.einsum("nk,nkc->nc", sh_basis(dirs), world.sh) + 0.5 if n else np.zeros((0, 3))
    return Projection(np.stack([u, v], 1), cov2d, conics, z, np.stack([rx, ry], 1), np.clip(raw, 0.0, 1.0),
                      world.opacities, visible, pc, J, cov3d, dirs, dist, raw)


def project_gaussian(g, cam: Camera, dilation: float = DEFAULT_DILATION):
    """Project one Gaussian; returns ``(mean_px, cov_px2, depth)`` or ``CULLED``.

    ``g`` may be an ``AttachedGaussian`` or a mapping with ``position``,
    ``rotmat``, ``scale`` and ``opacity``.
    """
    from .texture import quat_to_rotmat
    if isinstance(g, dict):
        pos, rot, scale, op = g["position"], g.get("rotmat"), g["scale"], g.get("opacity", 1.0)
        if rot is None:
            rot = quat_to_rotmat(g["rotation"])
    else:
        pos, rot, scale, op = g.position, quat_to_rotmat(g.rotation), g.scale, g.opacity
    w = WorldGaussians(np.asarray(pos, dtype=np.float64)[None], np.asarray(rot, dtype=np.float64)[None],
                       np.asarray(scale, dtype=np.float64)[None], np.array([float(op)]), np.zeros((1, 16, 3)))
    p = project(w, cam, dilation)
    if not p.visible[0]:
        return CULLED
    return p.means2d[0], p.cov2d[0], float(p.depths[0])


# ------------------------------------------------------------------- binning

def bin_tiles(proj: Projection, width: int, height: int):
    """CSR lists of Gaussian indices per tile, each sorted front to back."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    idx = np.flatnonzero(proj.visible)
    idx = idx[np.argsort(proj.depths[idx], kind="stable")]
    m = proj.means2d[idx]
    r = proj.radii[idx]
    x0 = np.clip(np.ceil(m[:, 0] - r[:, 0]), 0, width - 1).astype(np.int64) // TILE
    x1 = np.clip(np.floor(m[:, 0] + r[:, 0]), 0, width - 1).astype(np.int64) // TILE
    y0 = np.clip(np.ceil(m[:, 1] - r[:, 1]), 0, height - 1).astype(np.int64) // TILE
    y1 = np.clip(np.floor(m[:, 1] + r[:, 1]), 0, height - 1).astype(np.int64) // TILE
    nx = x1 - x0 + 1
    ny = y1 - y0 + 1
    counts = nx * ny
    rep = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = x0[rep] + local % nx[rep]
    ty = y0[rep] + local // nx[rep]
    tile = ty * tiles_x + tx
    order = np.argsort(tile, kind="stable")
    ids = idx[rep[order]]
    start = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile, minlength=tiles_x * tiles_y), out=start[1:])
    return start, np.ascontiguousarray(ids, dtype=np.int64), tiles_x


# ------------------------------------------------------------------- kernels

@njit(cache=True)
def _forward(start, ids, tiles_x, width, height, means2d, conics, opac, colors, bg, out_rgb, out_T):
    n_tiles = len(start) - 1
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        for py in range(ty * 16, min(height, ty * 16 + 16)):
            for px in range(tx * 16, min(width, tx * 16 + 16)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for e in range(start[t], start[t + 1]):
                    g = ids[e]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    a = min(0.99, opac[g] * np.exp(power))
                    if a < 1.0 / 255.0:
                        continue
                    w = a * T
                    c0 += colors[g, 0] * w
                    c1 += colors[g, 1] * w
                    c2 += colors[g, 2] * w
                    T *= 1.0 - a
                out_rgb[py, px, 0] = c0 + T * bg[0]
                out_rgb[py, px, 1] = c1 + T * bg[1]
                out_rgb[py, px, 2] = c2 + T * bg[2]
                out_T[py, px] = T


@njit(cache=True)
def _backward(start, ids, tiles_x, width, height, means2d, conics, opac, colors, bg, final_T, g_rgb, g_alpha,
              g_mean2d, g_conic, g_opac, g_color):
    n_tiles = len(start) - 1
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        for py in range(ty * 16, min(height, ty * 16 + 16)):
            for px in range(tx * 16, min(width, tx * 16 + 16)):
                gr0 = g_rgb[py, px, 0]
                gr1 = g_rgb[py, px, 1]
                gr2 = g_rgb[py, px, 2]
                ga = g_alpha[py, px]
                if gr0 == 0.0 and gr1 == 0.0 and gr2 == 0.0 and ga == 0.0:
                    continue
                T_end = final_T[py, px]
                T = T_end
                acc0 = T_end * bg[0]
                acc1 = T_end * bg[1]
                acc2 = T_end * bg[2]
                for e in range(start[t + 1] - 1, start[t] - 1, -1):
                    g = ids[e]
                    dx = px - means2d[g, 0]
                    dy = py - means2d[g, 1]
                    power = -0.5 * (conics[g, 0] * dx * dx + conics[g, 2] * dy * dy) - conics[g, 1] * dx * dy
                    if power > 0.0:
                        continue
                    G = np.exp(power)
                    raw = opac[g] * G
                    a = min(0.99, raw)
                    if a < 1.0 / 255.0:
                        continue
                    one_m = 1.0 - a
                    T = T / one_m  # transmittance in front of g
                    w = a * T
                    g_color[g, 0] += w * gr0
                    g_color[g, 1] += w * gr1
                    g_color[g, 2] += w * gr2
                    dL_da = (gr0 * (colors[g, 0] * T - acc0 / one_m) + gr1 * (colors[g, 1] * T - acc1 / one_m)
                             + gr2 * (colors[g, 2] * T - acc2 / one_m) + ga * T_end / one_m)
                    acc0 += colors[g, 0] * w
                    acc1 += colors[g, 1] * w
                    acc2 += colors[g, 2] * w
                    if raw >= 0.99:
                        continue
                    g_opac[g] += dL_da * G
                    g_pow = dL_da * raw
                    # d power / d mean = Q d
                    g_mean2d[g, 0] += g_pow * (conics[g, 0] * dx + conics[g, 1] * dy)
                    g_mean2d[g, 1] += g_pow * (conics[g, 1] * dx + conics[g, 2] * dy)
                    g_conic[g, 0] += -0.5 * g_pow * dx * dx
                    g_conic[g, 1] += -g_pow * dx * dy
                    g_conic[g, 2] += -0.5 * g_pow * dy * dy


# ------------------------------------------------------------------ public API

@dataclass
class RenderContext:
    camera: Camera
    world: WorldGaussians
    proj: Projection
    tile_start: np.ndarray
    tile_ids: np.ndarray
    tiles_x: int
    final_T: np.ndarray
    background: np.ndarray
    dilation: float
    attached: Optional[AttachedGaussians] = None


@dataclass
class RenderedImage:
    rgb: np.ndarray
    alpha: np.ndarray
    context: Optional[RenderContext] = field(default=None, repr=False, compare=False)

    @property
    def shape(self):
        return self.alpha.shape


@dataclass
class GradientBuffers:
    """Gradients w.r.t. world Gaussian parameters (and optionally mesh/texels).

    ``rotation`` holds gradients w.r.t. the 3x3 world rotation matrices.
    """

    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    vertices: Optional[np.ndarray] = None
    texels: Optional[dict] = None


def rasterize(gaussians, cam: Camera, background=(0.0, 0.0, 0.0), dilation: float = DEFAULT_DILATION,
              visible: Optional[np.ndarray] = None) -> RenderedImage:
    """Alpha-composite Gaussians into an image; the result keeps its context for backward."""
    attached = gaussians if isinstance(gaussians, AttachedGaussians) else None
    world = gaussians.world if attached is not None else gaussians
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
    proj = project(world, cam, dilation, visible)
    start, ids, tiles_x = bin_tiles(proj, cam.width, cam.height)
    rgb = np.empty((cam.height, cam.width, 3))
    T = np.empty((cam.height, cam.width))
    _forward(start, ids, tiles_x, cam.width, cam.height, np.ascontiguousarray(proj.means2d),
             np.ascontiguousarray(proj.conics), np.ascontiguousarray(proj.opacities, dtype=np.float64),
             np.ascontiguousarray(proj.colors), bg, rgb, T)
    ctx = RenderContext(cam, world, proj, start, ids, tiles_x, T, bg, dilation, attached)
    return RenderedImage(rgb, 1.0 - T, ctx)


def rasterize_backward(ctx, g_rgb, g_alpha=None, need_vertices: bool = True,
                       need_texels: bool = True) -> GradientBuffers:
    if isinstance(ctx, RenderedImage):
        ctx = ctx.context
    cam, proj, world = ctx.camera, ctx.proj, ctx.world
    shape = (cam.height, cam.width)
    g_rgb = np.asarray(g_rgb, dtype=np.float64)
    if g_rgb.shape != shape + (3,):
        raise ShapeMismatch(f"image gradient has shape {g_rgb.shape}, expected {shape + (3,)}")
    if g_alpha is None:
        g_alpha = np.zeros(shape)
    g_alpha = np.asarray(g_alpha, dtype=np.float64)
    if g_alpha.shape != shape:
        raise ShapeMismatch(f"alpha gradient has shape {g_alpha.shape}, expected {shape}")
    n = len(world)
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    _backward(ctx.tile_start, ctx.tile_ids, ctx.tiles_x, cam.width, cam.height,
              np.ascontiguousarray(proj.means2d), np.ascontiguousarray(proj.conics),
              np.ascontiguousarray(proj.opacities, dtype=np.float64), np.ascontiguousarray(proj.colors),
              ctx.background, ctx.final_T, np.ascontiguousarray(g_rgb), np.ascontiguousarray(g_alpha),
              g_mean2d, g_conic, g_opac, g_color)
    buf = _project_backward(world, cam, proj, g_mean2d, g_conic, g_opac, g_color)
    if ctx.attached is not None and (need_vertices or need_texels):
        vert, tex = attached_backward(ctx.attached, buf.position, buf.rotation, buf.scale, buf.opacity, buf.sh,
                                      need_vertices, need_texels)
        buf.vertices, buf.texels = vert, tex
    return buf


def _project_backward(world, cam, proj, g_mean2d, g_conic, g_opac, g_color) -> GradientBuffers:
    n = len(world)
    pc, J = proj.p_cam, proj.J
    z = np.where(np.abs(pc[:, 2]) > 1e-12, pc[:, 2], 1e-12)
    x, y = pc[:, 0], pc[:, 1]
    fx, fy = cam.fx, cam.fy
    g_pc = np.zeros((n, 3))
    g_pc[:, 0] = g_mean2d[:, 0] * fx / z
    g_pc[:, 1] = g_mean2d[:, 1] * fy / z
    g_pc[:, 2] = -g_mean2d[:, 0] * fx * x / z**2 - g_mean2d[:, 1] * fy * y / z**2

    # conic -> 2D covariance
    A, B, C = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 2]
    Q = np.stack([np.stack([A, B], -1), np.stack([B, C], -1)], -2)
    G_Q = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                    np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], -2)
    G_S2 = -Q @ G_Q @ Q
    M = J @ cam.R
    S3 = proj.cov3d
    G_S3 = np.swapaxes(M, 1, 2) @ G_S2 @ M
    G_M = 2.0 * G_S2 @ M @ S3
    G_J = G_M @ cam.R.T
    g_pc[:, 0] += G_J[:, 0, 2] * (-fx / z**2)
    g_pc[:, 1] += G_J[:, 1, 2] * (-fy / z**2)
    g_pc[:, 2] += (G_J[:, 0, 0] * (-fx / z**2) + G_J[:, 0, 2] * (2 * fx * x / z**3)
                   + G_J[:, 1, 1] * (-fy / z**2) + G_J[:, 1, 2] * (2 * fy * y / z**3))
    g_pos = g_pc @ cam.R

    # 3D covariance -> rotation, scale
    Rg, s = world.rotmats, world.scales
    G_Rg = 2.0 * G_S3 @ Rg * (s**2)[:, None, :]
    g_scale = 2.0 * s * np.einsum("nji,njk,nki->ni", Rg, G_S3, Rg)

    # colors -> SH and view direction
    inside = (proj.color_raw > 0.0) & (proj.color_raw < 1.0)
    g_raw = np.where(inside, g_color, 0.0)
    Y = sh_basis(proj.view_dirs) if n else np.zeros((0, 16))
    g_sh = Y[:, :, None] * g_raw[:, None, :]
    g_Y = np.einsum("nkc,nc->nk", world.sh, g_raw)
    g_dir = np.einsum("nk,nkd->nd", g_Y, sh_basis_jacobian(proj.view_dirs)) if n else np.zeros((0, 3))
    d = proj.view_dirs
    g_pos += (g_dir - d * np.einsum("nd,nd->n", d, g_dir)[:, None]) / np.maximum(proj.view_dist, 1e-300)[:, None]

    culled = ~proj.visible
    for arr in (g_pos, G_Rg, g_scale, g_opac, g_sh):
        arr[culled] = 0.0
    return GradientBuffers(g_pos, G_Rg, g_scale, g_opac, g_sh)


def visibility_mask(gaussians: AttachedGaussians, occluders, cam: Camera, delta: float = VISIBILITY_DELTA,
                    self_index: Optional[int] = None) -> np.ndarray:
    """True where the segment from the camera to a Gaussian's surface point is unobstructed.

    ``occluders`` is a list of meshes (or position/face pairs via objects with
    ``vertices``/``faces``, or prebuilt ``BVH``s). The occluder at
    ``self_index`` is the Gaussians' own mesh; its face under each Gaussian is
    skipped.
    """
    pts = gaussians.origin
    n = len(pts)
    vis = np.ones(n, dtype=bool)
    if n == 0 or not occluders:
        return vis
    c = cam.center
    dvec = pts - c
    dist = np.linalg.norm(dvec, axis=1)
    dirs = dvec / np.maximum(dist, 1e-300)[:, None]
    origins = np.broadcast_to(c, (n, 3))
    for i, occ in enumerate(occluders):
        if isinstance(occ, BVH):
            bvh = occ
        else:
            bvh = getattr(occ, "bvh", None)
            if bvh is None:
                bvh = BVH(positions_of(occ), occ.faces)
        excl = gaussians.binding.face if i == self_index else None
        face, _, _ = bvh.ray_first_hit(origins, dirs, 0.0, dist - delta, excl)
        vis &= face < 0
    return vis
