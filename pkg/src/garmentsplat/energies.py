"""Physical regularizers with analytic vertex gradients.

Every energy returns an :class:`EnergyGrad`. Positions may be passed either as
a :class:`TriangleMesh` or as a raw ``(V, 3)`` array; the static structures
(topology, rest states, virtual edges) are built once from the rest mesh.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bvh import BVH
from .errors import DegenerateFace, MissingRestState, StaleCollisionSet, ValidationError
from .mesh import (DEFAULT_THICKNESS, FaceRestStates, Topology, TriangleMesh, face_normals,
                   positions_of, scatter_add, triangle_areas)


@dataclass(frozen=True)
class MaterialParams:
    lame_lambda: float = 2.1e4
    lame_mu: float = 1.15e4
    thickness: float = DEFAULT_THICKNESS
    bending_stiffness: float = 3.96e-5

    def __post_init__(self):
        if not self.lame_mu > 0 or self.lame_lambda < 0 or not self.thickness > 0:
            raise ValidationError("need lame_mu > 0, lame_lambda >= 0, thickness > 0")
        if self.bending_stiffness < 0:
            raise ValidationError("bending_stiffness must be non-negative")


@dataclass
class EnergyGrad:
    value: float
    grad: Optional[np.ndarray] = None

    def __add__(self, other: "EnergyGrad") -> "EnergyGrad":
        if self.grad is None or other.grad is None:
            return EnergyGrad(self.value + other.value)
        return EnergyGrad(self.value + other.value, self.grad + other.grad)

    def scaled(self, w: float) -> "EnergyGrad":
        return EnergyGrad(w * self.value, None if self.grad is None else w * self.grad)


def pairwise_sum(values: np.ndarray) -> float:
    """Order-fixed tree reduction so totals do not depend on chunking."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    while v.size > 1:
        if v.size % 2:
            v = np.append(v, 0.0)
        v = v[0::2] + v[1::2]
    return float(v[0])


def _cross_grads(u, v, g):
    """Gradients of ``g . (u x v)`` w.r.t. u and v."""
    return np.cross(v, g), np.cross(g, u)


def bending_energy(mesh, topology: Topology, with_grad: bool = True, weights=None,
                   rest_angle=None, pair_scale=None) -> EnergyGrad:
    """Sum over face pairs of ``w * wrap(theta - theta_rest)^2``.

    ``w = |e|^2 / a`` uses the rest edge length and rest area sum unless
    ``weights`` overrides it. ``theta`` is the dihedral angle between face
    normals, signed along the shared edge as it runs in the first face.
    """
    x = positions_of(mesh)
    faces = topology.faces
    pf = topology.pair_faces
    pe = topology.pair_edge_vertices
    nv = len(x)
    if len(pf) == 0:
        return EnergyGrad(0.0, np.zeros_like(x) if with_grad else None)
    if weights is None:
        weights = topology.pair_rest_edge_length**2 / topology.pair_rest_area_sum
    if rest_angle is None:
        rest_angle = topology.pair_rest_angle
    if pair_scale is not None:
        weights = weights * pair_scale

    N = face_normals(x, faces, normalize=False)
    ln = np.linalg.norm(N, axis=1)
    if np.any(ln <= 2e-12):
        raise DegenerateFace(f"degenerate current face {int(np.argmin(ln))}")
    n = N / ln[:, None]
    na, nb = n[pf[:, 0]], n[pf[:, 1]]
    e = x[pe[:, 1]] - x[pe[:, 0]]
    le = np.linalg.norm(e, axis=1)
    eh = e / le[:, None]
    cr = np.cross(na, nb)
    s = np.einsum("ij,ij->i", cr, eh)
    c = np.einsum("ij,ij->i", na, nb)
    theta = np.arctan2(s, c)
    d = theta - rest_angle
    wrapped = np.arctan2(np.sin(d), np.cos(d))
    value = pairwise_sum(weights * wrapped**2)
    if not with_grad:
        return EnergyGrad(value)

    g_theta = 2.0 * weights * wrapped
    denom = s * s + c * c
    g_s = g_theta * c / denom
    g_c = -g_theta * s / denom
    # s = (na x nb) . eh ; c = na . nb
    g_na = g_s[:, None] * np.cross(nb, eh) + g_c[:, None] * nb
    g_nb = g_s[:, None] * np.cross(eh, na) + g_c[:, None] * na
    g_eh = g_s[:, None] * cr
    g_e = (g_eh - eh * np.einsum("ij,ij->i", eh, g_eh)[:, None]) / le[:, None]

    g_n = scatter_add(len(faces), pf[:, 0], g_na) + scatter_add(len(faces), pf[:, 1], g_nb)
    g_N = (g_n - n * np.einsum("ij,ij->i", n, g_n)[:, None]) / ln[:, None]
    p = x[faces]
    u = p[:, 1] - p[:, 0]
    v = p[:, 2] - p[:, 0]
    g_u, g_v = _cross_grads(u, v, g_N)
    corner = np.stack([-(g_u + g_v), g_u, g_v], axis=1).reshape(-1, 3)
    grad = scatter_add(nv, faces.ravel(), corner)
    grad += scatter_add(nv, pe[:, 1], g_e) - scatter_add(nv, pe[:, 0], g_e)
    return EnergyGrad(value, grad)


def strain_energy(mesh, faces: np.ndarray, rest: FaceRestStates, material: MaterialParams,
                  with_grad: bool = True, lambda_scale=None, mu_scale=None) -> EnergyGrad:
    """St. Venant-Kirchhoff membrane energy ``sum V (lam/2 tr(G)^2 + mu tr(G^2))``."""
    if rest is None:
        raise MissingRestState("strain energy needs face rest states")
    x = positions_of(mesh)
    faces = np.asarray(faces)
    if len(rest) != len(faces):
        raise MissingRestState(f"{len(rest)} rest states for {len(faces)} faces")
    p = x[faces]
    ds = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    F = ds @ rest.dm_inv
    G = 0.5 * (np.swapaxes(F, 1, 2) @ F - np.eye(2))
    trG = G[:, 0, 0] + G[:, 1, 1]
    trG2 = np.einsum("nij,nij->n", G, G)
    lam = material.lame_lambda * (1.0 if lambda_scale is None else np.asarray(lambda_scale))
    mu = material.lame_mu * (1.0 if mu_scale is None else np.asarray(mu_scale))
    vol = rest.area * material.thickness
    value = pairwise_sum(vol * (0.5 * lam * trG**2 + mu * trG2))
    if not with_grad:
        return EnergyGrad(value)
    S = (lam * trG)[:, None, None] * np.eye(2) + 2.0 * np.asarray(mu)[..., None, None] * G
    P = F @ S
    g_ds = vol[:, None, None] * (P @ np.swapaxes(rest.dm_inv, 1, 2))
    corner = np.stack([-(g_ds[:, :, 0] + g_ds[:, :, 1]), g_ds[:, :, 0], g_ds[:, :, 1]], axis=1)
    return EnergyGrad(value, scatter_add(len(x), faces.ravel(), corner.reshape(-1, 3)))


def positions_hash(x: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(x, dtype=np.float64).tobytes(), digest_size=16).hexdigest()


class MeshCollider:
    """Closest-point oracle over a (moving) mesh, backed by a refittable BVH."""

    def __init__(self, mesh: TriangleMesh):
        self.faces = mesh.faces
        self.vertices = np.array(mesh.vertices)
        self.bvh = BVH(self.vertices, self.faces)
        self.normals = face_normals(self.vertices, self.faces)

    def update(self, vertices) -> "MeshCollider":
        self.vertices = np.array(vertices, dtype=np.float64)
        self.bvh.refit(self.vertices)
        self.normals = face_normals(self.vertices, self.faces)
        return self

    def mesh(self) -> TriangleMesh:
        return TriangleMesh(self.vertices, self.faces)


def as_collider(body) -> MeshCollider:
    return body if isinstance(body, MeshCollider) else MeshCollider(body)


@dataclass
class CollisionSet:
    """Closest body face, witness point and unit normal per garment vertex."""

    face: np.ndarray
    witness: np.ndarray
    normal: np.ndarray
    distance: np.ndarray
    positions_hash: str

    def __len__(self):
        return len(self.face)


def compute_collisions(garment, body, max_dist: float = np.inf) -> CollisionSet:
    x = positions_of(garment)
    col = as_collider(body)
    face, pt, _, _ = col.bvh.closest_points(x, max_dist)
    hit = face >= 0
    normal = np.zeros_like(x)
    normal[hit] = col.normals[face[hit]]
    witness = np.where(hit[:, None], pt, x)
    dist = np.where(hit, np.einsum("ij,ij->i", x - witness, normal), np.inf)
    return CollisionSet(face, witness, normal, dist, positions_hash(x))


def body_penetration_energy(garment, collisions: CollisionSet, eps_body: float = 3e-3,
                            with_grad: bool = True, check_fresh: bool = True, weights=None) -> EnergyGrad:
    """Cubic penalty ``sum max(eps - (v - f) . n, 0)^3``.

    Witness points and normals are frozen within the evaluation.
    """
    x = positions_of(garment)
    if len(collisions) != len(x):
        raise StaleCollisionSet("collision set size differs from vertex count")
    if check_fresh and positions_hash(x) != collisions.positions_hash:
        raise StaleCollisionSet("collision set was computed for different positions")
    valid = collisions.face >= 0
    d = np.einsum("ij,ij->i", x - collisions.witness, collisions.normal)
    pen = np.where(valid, np.maximum(eps_body - d, 0.0), 0.0)
    w = 1.0 if weights is None else np.asarray(weights)
    value = pairwise_sum(w * pen**3)
    if not with_grad:
        return EnergyGrad(value)
    grad = (-3.0 * w * pen**2)[:, None] * collisions.normal
    return EnergyGrad(value, grad)


@dataclass(frozen=True)
class VirtualEdges:
    """Rest-length links between opposite faces, anchored at face points."""

    face_a: np.ndarray
    face_b: np.ndarray
    bary_a: np.ndarray
    bary_b: np.ndarray
    rest_length: np.ndarray

    def __len__(self):
        return len(self.face_a)


@dataclass(frozen=True)
class VirtualEdge:
    face_a: int
    face_b: int
    anchor_a: tuple
    anchor_b: tuple
    rest_length: float


def build_virtual_edges(rest_mesh: TriangleMesh, parallel_tol_deg: float = 30.0) -> VirtualEdges:
    """Link faces to the opposite face hit by a ray along their inward normal.

    A pair is kept when the two normals are within ``parallel_tol_deg`` of
    anti-parallel. Anchors are the face centroids; pairs are unordered and
    deduplicated.
    """
    x = rest_mesh.rest
    faces = rest_mesh.faces
    n = face_normals(x, faces)
    cent = x[faces].mean(axis=1)
    bvh = BVH(x, faces)
    hit, _, _ = bvh.ray_first_hit(cent, -n, tmin=0.0, exclude=np.arange(len(faces)))
    src = np.flatnonzero(hit >= 0)
    dst = hit[src]
    cos = np.einsum("ij,ij->i", n[src], n[dst])
    keep = cos <= -np.cos(np.deg2rad(parallel_tol_deg))
    pairs = np.sort(np.stack([src[keep], dst[keep]], axis=1), axis=1)
    if len(pairs):
        pairs = np.unique(pairs, axis=0)
    pairs = pairs.reshape(-1, 2)
    third = np.full((len(pairs), 3), 1.0 / 3.0)
    # same arithmetic as the energy so that l == L bit for bit at rest
    rest_len = np.linalg.norm(_anchors(x, faces, pairs[:, 0], third) - _anchors(x, faces, pairs[:, 1], third),
                              axis=1)
    return VirtualEdges(pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64), third, third.copy(), rest_len)


def _anchors(x, faces, face_idx, bary):
    return np.einsum("nk,nkd->nd", bary, x[faces[face_idx]])


def virtual_edge_list(ves: VirtualEdges) -> list:
    return [VirtualEdge(int(a), int(b), tuple(ba), tuple(bb), float(L))
            for a, b, ba, bb, L in zip(ves.face_a, ves.face_b, ves.bary_a, ves.bary_b, ves.rest_length)]


def virtual_edge_energy(mesh, faces: np.ndarray, ves: VirtualEdges, with_grad: bool = True) -> EnergyGrad:
    """``sum max(L - l, 0)^2`` over virtual edges."""
    x = positions_of(mesh)
    if len(ves) == 0:
        return EnergyGrad(0.0, np.zeros_like(x) if with_grad else None)
    fa, fb = faces[ves.face_a], faces[ves.face_b]
    pa = _anchors(x, faces, ves.face_a, ves.bary_a)
    pb = _anchors(x, faces, ves.face_b, ves.bary_b)
    dvec = pa - pb
    length = np.linalg.norm(dvec, axis=1)
    short = np.maximum(ves.rest_length - length, 0.0)
    value = pairwise_sum(short**2)
    if not with_grad:
        return EnergyGrad(value)
    coef = np.where(short > 0, -2.0 * short / np.maximum(length, 1e-300), 0.0)
    g_pa = coef[:, None] * dvec
    nv = len(x)
    grad = scatter_add(nv, fa.ravel(), (ves.bary_a[:, :, None] * g_pa[:, None, :]).reshape(-1, 3))
    grad -= scatter_add(nv, fb.ravel(), (ves.bary_b[:, :, None] * g_pa[:, None, :]).reshape(-1, 3))
    return EnergyGrad(value, grad)


def _hinge_norm(r: np.ndarray):
    value = float(np.sqrt(np.sum(r**2)))
    g = r / value if value > 0 else np.zeros_like(r)
    return value, g


def gaussian_regularizer_arrays(offset: np.ndarray, log_scale: np.ndarray, eps_pos: float, eps_scale: float):
    """Hinge norms ``||max(|mu| - eps_pos, 0)||`` and ``||max(s - eps_scale, 0)||`` over a texel list.

    Returns ``(L_pos, L_scale, d/d offset, d/d log_scale)``.
    """
    mu = np.asarray(offset, dtype=np.float64)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    mu_norm = np.linalg.norm(mu, axis=1)
    r_pos = np.maximum(mu_norm - eps_pos, 0.0)
    l_pos, g_rpos = _hinge_norm(r_pos)
    r_scale = np.maximum(s - eps_scale, 0.0)
    l_scale, g_rscale = _hinge_norm(r_scale)
    g_mu = np.where((r_pos > 0)[:, None], (g_rpos / np.maximum(mu_norm, 1e-300))[:, None] * mu, 0.0)
    g_ls = np.where(r_scale > 0, g_rscale * s, 0.0)
    return l_pos, l_scale, g_mu, g_ls


def gaussian_regularizers(texture, eps_pos: float, eps_scale: float):
    """Offset and scale hinge norms over valid texels.

    Returns ``(L_pos, L_scale, grads)`` where ``grads`` maps texture channel
    names (``"offset"``, ``"log_scale"``) to ``(H, W, c)`` gradient arrays.
    """
    mask = texture.valid_mask
    l_pos, l_scale, g_mu, g_ls = gaussian_regularizer_arrays(texture.offset[mask], texture.log_scale[mask],
                                                             eps_pos, eps_scale)
    g_off = np.zeros(mask.shape + (3,))
    g_off[mask] = g_mu
    g_log = np.zeros(mask.shape + (3,))
    g_log[mask] = g_ls
    return l_pos, l_scale, {"offset": g_off, "log_scale": g_log}


def mesh_areas(mesh) -> np.ndarray:
    return triangle_areas(positions_of(mesh), mesh.faces)
