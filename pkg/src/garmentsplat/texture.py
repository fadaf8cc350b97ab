"""Gaussian textures: 59-channel texel grids that spawn surface-attached Gaussians.

Channel layout (float32, row-major ``H x W x 59``):

====== ======= ============================================
index  width   content
====== ======= ============================================
0      48      SH coefficients, 16 x 3 (coefficient-major)
48     1       opacity, pre-sigmoid logit
49     3       scale, natural log, in units of the face scale
52     4       local rotation quaternion ``(w, x, y, z)``
56     3       offset in the local frame, in units of the face scale
====== ======= ============================================
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ShapeMismatch, UvCoverageError
from .mesh import (LocalFrame, TriangleMesh, barycentric_positions, face_frames, face_frames_backward,
                   scatter_add)

N_CHANNELS = 59
SH_SLICE = slice(0, 48)
OPACITY = 48
SCALE_SLICE = slice(49, 52)
QUAT_SLICE = slice(52, 56)
OFFSET_SLICE = slice(56, 59)
CHANNEL_LAYOUT = "sh:48,opacity_logit:1,log_scale:3,quat_wxyz:4,offset:3"
DEFAULT_RESOLUTION = 512


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    ident = np.zeros_like(q)
    ident[..., 0] = 1.0
    return np.where(n > 0, q / np.where(n > 0, n, 1.0), ident)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices of (normalized) ``(w, x, y, z)`` quaternions."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def quat_to_rotmat_backward(q: np.ndarray, g_R: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = quat_normalize(q)
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = g_R
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2]
              - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    g_qn = np.stack([gw, gx, gy, gz], -1)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, (g_qn - qn * np.sum(qn * g_qn, -1, keepdims=True)) / safe, 0.0)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([aw * bw - ax * bx - ay * by - az * bz,
                     aw * bx + ax * bw + ay * bz - az * by,
                     aw * by - ax * bz + ay * bw + az * bx,
                     aw * bz + ax * by - ay * bx + az * bw], -1)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    xyzw = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_quat()
    q = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q.reshape(R.shape[:-2] + (4,))


@dataclass
class GaussianTexel:
    """One texel's local Gaussian, in stored (unconstrained) encodings."""

    sh: np.ndarray
    opacity_logit: float
    log_scale: np.ndarray
    rotation: np.ndarray
    offset: np.ndarray

    @classmethod
    def from_channels(cls, ch) -> "GaussianTexel":
        ch = np.asarray(ch, dtype=np.float64)
        return cls(ch[SH_SLICE].reshape(16, 3), float(ch[OPACITY]), ch[SCALE_SLICE], ch[QUAT_SLICE],
                   ch[OFFSET_SLICE])

    def to_channels(self) -> np.ndarray:
        out = np.zeros(N_CHANNELS)
        out[SH_SLICE] = np.ravel(self.sh)
        out[OPACITY] = self.opacity_logit
        out[SCALE_SLICE] = self.log_scale
        out[QUAT_SLICE] = self.rotation
        out[OFFSET_SLICE] = self.offset
        return out

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def quaternion(self) -> np.ndarray:
        return quat_normalize(self.rotation)


@dataclass
class GaussianTexture:
    """``H x W`` grid of Gaussian parameters plus a validity mask.

    ``data`` is float32; invalid texels hold zeros.
    """

    data: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.valid_mask = np.ascontiguousarray(self.valid_mask, dtype=bool)
        if self.data.ndim != 3 or self.data.shape[2] != N_CHANNELS:
            raise ShapeMismatch(f"texture data must be (H, W, {N_CHANNELS}), got {self.data.shape}")
        if self.valid_mask.shape != self.data.shape[:2]:
            raise ShapeMismatch("valid_mask shape does not match texture")
        self.data[~self.valid_mask] = 0.0

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())

    @property
    def sh(self) -> np.ndarray:
        return self.data[..., SH_SLICE].reshape(self.height, self.width, 16, 3)

    @property
    def opacity_logit(self) -> np.ndarray:
        return self.data[..., OPACITY]

    @property
    def log_scale(self) -> np.ndarray:
        return self.data[..., SCALE_SLICE]

    @property
    def rotation(self) -> np.ndarray:
        return self.data[..., QUAT_SLICE]

    @property
    def offset(self) -> np.ndarray:
        return self.data[..., OFFSET_SLICE]

    def texel(self, row: int, col: int) -> GaussianTexel:
        return GaussianTexel.from_channels(self.data[row, col])

    def copy(self) -> "GaussianTexture":
        return GaussianTexture(self.data.copy(), self.valid_mask.copy())

    @classmethod
    def default(cls, valid_mask, log_scale=-1.0, opacity_logit=2.0, sh_dc=0.0) -> "GaussianTexture":
        """Identity rotation, zero offset and SH; ``log_scale`` may be per texel."""
        valid_mask = np.asarray(valid_mask, dtype=bool)
        data = np.zeros(valid_mask.shape + (N_CHANNELS,), dtype=np.float32)
        data[..., OPACITY] = opacity_logit
        data[..., SCALE_SLICE] = np.broadcast_to(np.asarray(log_scale, dtype=np.float32)[..., None]
                                                 if np.ndim(log_scale) == 2 else log_scale,
                                                 valid_mask.shape + (3,))
        data[..., QUAT_SLICE.start] = 1.0
        data[..., 0:3] = sh_dc
        return cls(data, valid_mask)


def texel_uv_centers(height: int, width: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([(cols + 0.5) / width, (rows + 0.5) / height], -1)


@dataclass(frozen=True)
class TextureBinding:
    """Which face (and where on it) each valid texel is attached to.

    Texels are listed in row-major order.
    """

    rows: np.ndarray
    cols: np.ndarray
    face: np.ndarray
    bary: np.ndarray

    def __len__(self):
        return len(self.face)


def uv_coverage(mesh: TriangleMesh, height: int, width: int, texel_rows=None, texel_cols=None):
    """Locate texel centers in the mesh's UV triangles.

    Returns ``(face, bary)`` per texel (``-1`` when uncovered). A center that lies
    on a shared UV edge goes to the lowest face index.
    """
    if mesh.uvs is None:
        raise UvCoverageError("mesh has no UV coordinates")
    uv = mesh.uvs
    if texel_rows is None:
        texel_rows, texel_cols = np.divmod(np.arange(height * width), width)
    texel_rows = np.asarray(texel_rows)
    texel_cols = np.asarray(texel_cols)
    lookup = np.full((height, width), -1, dtype=np.int64)
    lookup[texel_rows, texel_cols] = np.arange(len(texel_rows))

    umin, umax = uv[:, :, 0].min(1), uv[:, :, 0].max(1)
    vmin, vmax = uv[:, :, 1].min(1), uv[:, :, 1].max(1)
    c0 = np.clip(np.ceil(umin * width - 0.5 - 1e-9), 0, width).astype(np.int64)
    c1 = np.clip(np.floor(umax * width - 0.5 + 1e-9), -1, width - 1).astype(np.int64)
    r0 = np.clip(np.ceil(vmin * height - 0.5 - 1e-9), 0, height).astype(np.int64)
    r1 = np.clip(np.floor(vmax * height - 0.5 + 1e-9), -1, height - 1).astype(np.int64)
    nc = np.maximum(c1 - c0 + 1, 0)
    nr = np.maximum(r1 - r0 + 1, 0)
    counts = nc * nr
    cand_face = np.repeat(np.arange(len(uv)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    ncf = nc[cand_face]
    rr = r0[cand_face] + local // np.maximum(ncf, 1)
    cc = c0[cand_face] + local % np.maximum(ncf, 1)
    tex_id = lookup[rr, cc]
    sel = tex_id >= 0
    cand_face, rr, cc, tex_id = cand_face[sel], rr[sel], cc[sel], tex_id[sel]

    p = np.stack([(cc + 0.5) / width, (rr + 0.5) / height], -1)
    a, b, c = uv[cand_face, 0], uv[cand_face, 1], uv[cand_face, 2]
    v0, v1, v2 = b - a, c - a, p - a
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    d20 = np.einsum("ij,ij->i", v2, v0)
    d21 = np.einsum("ij,ij->i", v2, v1)
    den = d00 * d11 - d01 * d01
    bv = (d11 * d20 - d01 * d21) / den
    bw = (d00 * d21 - d01 * d20) / den
    bary = np.stack([1.0 - bv - bw, bv, bw], -1)
    inside = np.all(bary >= -1e-12, axis=1)
    cand_face, tex_id, bary = cand_face[inside], tex_id[inside], bary[inside]
    # lowest face wins on shared edges: sort by (texel, face) and keep firsts
    order = np.lexsort((cand_face, tex_id))
    tex_id, cand_face, bary = tex_id[order], cand_face[order], bary[order]
    first = np.ones(len(tex_id), dtype=bool)
    first[1:] = tex_id[1:] != tex_id[:-1]
    face = np.full(len(texel_rows), -1, dtype=np.int64)
    out_bary = np.zeros((len(texel_rows), 3))
    face[tex_id[first]] = cand_face[first]
    b = np.clip(bary[first], 0.0, None)
    out_bary[tex_id[first]] = b / b.sum(1, keepdims=True)
    return face, out_bary


def coverage_mask(mesh: TriangleMesh, height: int, width: int) -> np.ndarray:
    face, _ = uv_coverage(mesh, height, width)
    return (face >= 0).reshape(height, width)


def bind_texture(texture: GaussianTexture, mesh: TriangleMesh) -> TextureBinding:
    rows, cols = np.nonzero(texture.valid_mask)
    face, bary = uv_coverage(mesh, texture.height, texture.width, rows, cols)
    missing = np.flatnonzero(face < 0)
    if missing.size:
        r, c = rows[missing[0]], cols[missing[0]]
        raise UvCoverageError(f"valid texel (row={r}, col={c}) lies outside every UV triangle "
                              f"({missing.size} uncovered)")
    return TextureBinding(rows, cols, face, bary)


@dataclass
class WorldGaussians:
    """World-space Gaussian parameters as consumed by the rasterizer."""

    means: np.ndarray
    rotmats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray

    def __len__(self):
        return len(self.means)

    def subset(self, keep) -> "WorldGaussians":
        return WorldGaussians(self.means[keep], self.rotmats[keep], self.scales[keep], self.opacities[keep],
                              self.sh[keep])

    @staticmethod
    def concatenate(items) -> "WorldGaussians":
        items = list(items)
        return WorldGaussians(*(np.concatenate([getattr(g, n) for g in items]) for n in
                                ("means", "rotmats", "scales", "opacities", "sh")))


@dataclass
class AttachedGaussian:
    row: int
    col: int
    face: int
    bary: tuple
    frame: LocalFrame
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    sh: np.ndarray


@dataclass
class AttachedGaussians:
    """All Gaussians spawned from a texture on a mesh (structure of arrays)."""

    binding: TextureBinding
    faces: np.ndarray
    positions: np.ndarray
    local_sh: np.ndarray
    opacity_logit: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    offset: np.ndarray
    frame_R: np.ndarray
    frame_k: np.ndarray
    origin: np.ndarray
    local_R: np.ndarray
    world: WorldGaussians = field(repr=False)

    def __len__(self):
        return len(self.binding)

    def __getitem__(self, i) -> AttachedGaussian:
        b = self.binding
        frame = LocalFrame(self.frame_R[i], self.origin[i], float(self.frame_k[i]))
        wq = quat_multiply(rotmat_to_quat(self.frame_R[i]), quat_normalize(self.quat[i]))
        return AttachedGaussian(int(b.rows[i]), int(b.cols[i]), int(b.face[i]), tuple(b.bary[i]), frame,
                                self.world.means[i], wq, self.world.scales[i], float(self.world.opacities[i]),
                                self.world.sh[i])

    def world_quaternions(self) -> np.ndarray:
        return quat_multiply(rotmat_to_quat(self.frame_R), quat_normalize(self.quat))


def _transform(frame_R, frame_k, origin, local_R, log_scale, offset):
    means = frame_k[:, None] * np.einsum("nij,nj->ni", frame_R, offset) + origin
    rotmats = frame_R @ local_R
    scales = frame_k[:, None] * np.exp(log_scale)
    return means, rotmats, scales


def local_to_world(texel: GaussianTexel, frame: LocalFrame) -> dict:
    """World parameters of one texel placed in ``frame``."""
    R = np.asarray(frame.rotation, dtype=np.float64)
    k = float(frame.scale)
    q_local = quat_normalize(texel.rotation)
    position = k * R @ np.asarray(texel.offset, dtype=np.float64) + np.asarray(frame.origin, dtype=np.float64)
    return {
        "position": position,
        "rotation": quat_multiply(rotmat_to_quat(R), q_local),
        "rotmat": R @ quat_to_rotmat(q_local),
        "scale": k * texel.scale,
        "opacity": texel.opacity,
        "sh": np.asarray(texel.sh, dtype=np.float64),
    }


def attach(texture: GaussianTexture, binding: TextureBinding, mesh_or_positions, faces=None,
           params: Optional[dict] = None) -> AttachedGaussians:
    """Place every bound texel on the surface at the given vertex positions.

    ``params`` may supply float64 local parameter arrays (keys ``sh``,
    ``opacity_logit``, ``log_scale``, ``quat``, ``offset``) that override the
    texture, which lets optimizers keep a full-precision copy.
    """
    if isinstance(mesh_or_positions, TriangleMesh):
        x, faces = mesh_or_positions.vertices, mesh_or_positions.faces
    else:
        x = np.asarray(mesh_or_positions, dtype=np.float64)
    if params is None:
        params = texture_params(texture, binding)
    R_face, k_face = face_frames(x, faces)
    R = R_face[binding.face]
    k = k_face[binding.face]
    origin = barycentric_positions(x, faces, binding.face, binding.bary)
    local_R = quat_to_rotmat(params["quat"])
    means, rotmats, scales = _transform(R, k, origin, local_R, params["log_scale"], params["offset"])
    world = WorldGaussians(means, rotmats, scales, sigmoid(params["opacity_logit"]), params["sh"])
    return AttachedGaussians(binding, faces, x, params["sh"], params["opacity_logit"], params["log_scale"],
                             params["quat"], params["offset"], R, k, origin, local_R, world)


def texture_params(texture: GaussianTexture, binding: TextureBinding) -> dict:
    d = texture.data[binding.rows, binding.cols].astype(np.float64)
    return {
        "sh": d[:, SH_SLICE].reshape(-1, 16, 3),
        "opacity_logit": d[:, OPACITY],
        "log_scale": d[:, SCALE_SLICE],
        "quat": d[:, QUAT_SLICE],
        "offset": d[:, OFFSET_SLICE],
    }


def write_texture_params(texture: GaussianTexture, binding: TextureBinding, params: dict) -> None:
    r, c = binding.rows, binding.cols
    texture.data[r, c, SH_SLICE] = params["sh"].reshape(-1, 48)
    texture.data[r, c, OPACITY] = params["opacity_logit"]
    texture.data[r, c, SCALE_SLICE] = params["log_scale"]
    texture.data[r, c, QUAT_SLICE] = params["quat"]
    texture.data[r, c, OFFSET_SLICE] = params["offset"]


def spawn_gaussians(texture: GaussianTexture, mesh: TriangleMesh, binding: Optional[TextureBinding] = None
                    ) -> AttachedGaussians:
    """One Gaussian per valid texel, row-major, attached to the texel's UV face."""
    if binding is None:
        binding = bind_texture(texture, mesh)
    return attach(texture, binding, mesh)


def attached_backward(ag: AttachedGaussians, g_means, g_rotmats, g_scales, g_opacities, g_sh,
                      need_vertices: bool = True, need_params: bool = True):
    """Chain world-parameter gradients back to vertices and local parameters.

    Returns ``(vertex_grad or None, param_grads or None)``.
    """
    R, k = ag.frame_R, ag.frame_k
    mu = ag.offset
    vert = None
    params = None
    if need_vertices:
        Rmu = np.einsum("nij,nj->ni", R, mu)
        g_R = k[:, None, None] * np.einsum("ni,nj->nij", g_means, mu)
        g_R += g_rotmats @ np.swapaxes(ag.local_R, 1, 2)
        g_k = np.einsum("ni,ni->n", g_means, Rmu) + np.einsum("ni,ni->n", g_scales, np.exp(ag.log_scale))
        nf = len(ag.faces)
        gRf = scatter_add(nf, ag.binding.face, g_R)
        gkf = np.bincount(ag.binding.face, weights=g_k, minlength=nf)
        vert = face_frames_backward(ag.positions, ag.faces, gRf, gkf)
        corner = ag.binding.bary[:, :, None] * g_means[:, None, :]
        vert += scatter_add(len(ag.positions), ag.faces[ag.binding.face].ravel(), corner.reshape(-1, 3))
    if need_params:
        s = np.exp(ag.log_scale)
        op = sigmoid(ag.opacity_logit)
        g_local_R = np.swapaxes(R, 1, 2) @ g_rotmats
        params = {
            "sh": np.asarray(g_sh, dtype=np.float64),
            "opacity_logit": g_opacities * op * (1.0 - op),
            "log_scale": k[:, None] * g_scales * s,
            "quat": quat_to_rotmat_backward(ag.quat, g_local_R),
            "offset": k[:, None] * np.einsum("nji,nj->ni", R, g_means),
        }
    return vert, params


def initial_texture(mesh: TriangleMesh, height: int = DEFAULT_RESOLUTION, width: Optional[int] = None,
                    opacity: float = 0.9, size_factor: float = 1.0, sh_dc=0.0) -> GaussianTexture:
    """Default texture over the mesh's UV coverage.

    Each Gaussian's log-scale is set so its world size matches the texel
    spacing on its face: ``log(size_factor * sqrt(A_world / (A_uv * H * W)) / k)``.
    """
    width = height if width is None else width
    face, _ = uv_coverage(mesh, height, width)
    mask = (face >= 0).reshape(height, width)
    _, k = face_frames(mesh.vertices, mesh.faces)
    uv = mesh.uvs
    a_uv = 0.5 * np.abs((uv[:, 1, 0] - uv[:, 0, 0]) * (uv[:, 2, 1] - uv[:, 0, 1])
                        - (uv[:, 2, 0] - uv[:, 0, 0]) * (uv[:, 1, 1] - uv[:, 0, 1]))
    spacing = np.sqrt(mesh.face_areas() / np.maximum(a_uv * height * width, 1e-300))
    ls_face = np.log(size_factor * spacing / k)
    log_scale = np.zeros(height * width)
    log_scale[face >= 0] = ls_face[face[face >= 0]]
    return GaussianTexture.default(mask, log_scale.reshape(height, width), float(logit(opacity)), sh_dc)
