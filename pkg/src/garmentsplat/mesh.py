"""Triangle meshes, topology, surface points, local frames and deformation gradients."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateFace, InvalidMesh, InvalidSurfacePoint, MissingRestState

DEGENERATE_AREA = 1e-12
DEFAULT_THICKNESS = 5e-4


def scatter_add(n: int, index: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` into an ``(n, ...)`` array at ``index``.

    Uses bincount per trailing component, which is both faster than ``np.add.at``
    and sums in a fixed order.
    """
    index = np.asarray(index).ravel()
    values = np.asarray(values, dtype=np.float64)
    flat = values.reshape(index.size, -1)
    out = np.empty((n, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(index, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + values.shape[1:])


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def triangle_areas(x: np.ndarray, faces: np.ndarray) -> np.ndarray:
    p = x[faces]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


def face_normals(x: np.ndarray, faces: np.ndarray, normalize: bool = True) -> np.ndarray:
    p = x[faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    if normalize:
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return n


@dataclass(frozen=True)
class TriangleMesh:
    """Immutable triangle mesh in meters.

    ``uvs`` are per face corner, shape ``(F, 3, 2)``. ``rest_positions`` is the
    template geometry; when absent the current vertices are the rest pose.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: Optional[np.ndarray] = None
    rest_positions: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidMesh(f"vertices must be (V, 3), got {v.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise InvalidMesh("face index out of range")
        if not np.all(np.isfinite(v)):
            raise InvalidMesh("non-finite vertex coordinates")
        uv = None
        if self.uvs is not None:
            uv = np.asarray(self.uvs, dtype=np.float64)
            if uv.shape != (len(f), 3, 2):
                raise InvalidMesh(f"uvs must be (F, 3, 2), got {uv.shape}")
        rest = None
        if self.rest_positions is not None:
            rest = np.asarray(self.rest_positions, dtype=np.float64)
            if rest.shape != v.shape:
                raise InvalidMesh("rest_positions must match vertices in length")
        if f.size:
            areas = triangle_areas(rest if rest is not None else v, f)
            bad = np.flatnonzero(areas <= DEGENERATE_AREA)
            if bad.size:
                raise InvalidMesh(f"degenerate rest faces: {bad[:10].tolist()}")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "faces", _readonly(f))
        object.__setattr__(self, "uvs", None if uv is None else _readonly(uv))
        object.__setattr__(self, "rest_positions", None if rest is None else _readonly(rest))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def rest(self) -> np.ndarray:
        return self.vertices if self.rest_positions is None else self.rest_positions

    def with_positions(self, positions) -> "TriangleMesh":
        """Copy with replaced vertex positions (rest pose and UVs kept)."""
        positions = np.asarray(positions, dtype=np.float64)
        if positions.shape != self.vertices.shape:
            raise InvalidMesh("position buffer does not match vertex count")
        new = object.__new__(TriangleMesh)
        object.__setattr__(new, "vertices", _readonly(positions))
        object.__setattr__(new, "faces", self.faces)
        object.__setattr__(new, "uvs", self.uvs)
        object.__setattr__(new, "rest_positions", self.rest_positions if self.rest_positions is not None
                           else self.vertices)
        return new

    def face_areas(self) -> np.ndarray:
        return triangle_areas(self.vertices, self.faces)

    def face_normals(self) -> np.ndarray:
        return face_normals(self.vertices, self.faces)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def positions_of(mesh_or_positions) -> np.ndarray:
    if isinstance(mesh_or_positions, TriangleMesh):
        return mesh_or_positions.vertices
    return np.asarray(mesh_or_positions, dtype=np.float64)


def check_uv_charts(mesh: TriangleMesh, tol: float = 1e-9) -> None:
    """Raise InvalidMesh if any two UV triangles overlap with positive area."""
    if mesh.uvs is None or mesh.n_faces < 2:
        return
    uv = mesh.uvs
    cent = uv.mean(axis=1)
    rad = np.linalg.norm(uv - cent[:, None], axis=2).max()
    pairs = cKDTree(cent).query_pairs(2.0 * rad + tol, output_type="ndarray")
    if len(pairs) == 0:
        return
    a, b = uv[pairs[:, 0]], uv[pairs[:, 1]]
    separated = np.zeros(len(pairs), dtype=bool)
    for tri in (a, b):
        for k in range(3):
            e = tri[:, (k + 1) % 3] - tri[:, k]
            axis = np.stack([-e[:, 1], e[:, 0]], axis=1)
            pa = np.einsum("pkd,pd->pk", a, axis)
            pb = np.einsum("pkd,pd->pk", b, axis)
            overlap = np.minimum(pa.max(1), pb.max(1)) - np.maximum(pa.min(1), pb.min(1))
            scale = np.linalg.norm(axis, axis=1)
            separated |= overlap <= tol * np.maximum(scale, 1e-300)
    hit = np.flatnonzero(~separated)
    if hit.size:
        i, j = pairs[hit[0]]
        raise InvalidMesh(f"UV triangles {i} and {j} overlap")


@dataclass(frozen=True)
class Topology:
    """Edges, dihedral pairs and adjacency derived from a mesh.

    Dihedral pair ``p`` joins faces ``pair_faces[p] = (a, b)`` across the edge
    ``pair_edge_vertices[p] = (v0, v1)``, oriented as the edge runs inside face
    ``a``. Rest quantities are taken from the mesh's rest pose.
    """

    n_vertices: int
    faces: np.ndarray
    edges: np.ndarray
    face_edges: np.ndarray
    pair_faces: np.ndarray
    pair_edge: np.ndarray
    pair_edge_vertices: np.ndarray
    pair_rest_edge_length: np.ndarray
    pair_rest_area_sum: np.ndarray
    pair_rest_angle: np.ndarray
    adjacency_offsets: np.ndarray
    adjacency_indices: np.ndarray
    nonmanifold_edges: np.ndarray
    boundary_edges: np.ndarray = field(default=None)

    @property
    def dihedral_pairs(self) -> np.ndarray:
        return self.pair_faces

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, v: int) -> np.ndarray:
        return self.adjacency_indices[self.adjacency_offsets[v]:self.adjacency_offsets[v + 1]]

    @property
    def vertex_adjacency(self) -> list:
        return [self.neighbors(v) for v in range(self.n_vertices)]


def dihedral_angles(x: np.ndarray, faces: np.ndarray, pair_faces: np.ndarray,
                    pair_edge_vertices: np.ndarray) -> np.ndarray:
    """Signed angle between the normals of each face pair, in (-pi, pi]."""
    n = face_normals(x, faces)
    na, nb = n[pair_faces[:, 0]], n[pair_faces[:, 1]]
    e = x[pair_edge_vertices[:, 1]] - x[pair_edge_vertices[:, 0]]
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    s = np.einsum("ij,ij->i", np.cross(na, nb), e)
    c = np.einsum("ij,ij->i", na, nb)
    return np.arctan2(s, c)


def build_topology(mesh: TriangleMesh) -> Topology:
    """Extract unique edges, manifold dihedral pairs and vertex adjacency.

    Edges with more than two incident faces are reported in
    ``nonmanifold_edges`` (with a warning) and excluded from the pairs.
    """
    if mesh.n_faces == 0 or mesh.n_vertices == 0:
        raise InvalidMesh("empty mesh")
    f = mesh.faces
    nf = len(f)
    half = np.stack([f, np.roll(f, -1, axis=1)], axis=2).reshape(-1, 2)  # (3F, 2): v_k -> v_{k+1}
    key = np.sort(half, axis=1)
    edges, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    face_edges = inverse.reshape(nf, 3)

    order = np.argsort(inverse, kind="stable")
    he_sorted = order
    edge_of = inverse[he_sorted]
    starts = np.searchsorted(edge_of, np.arange(len(edges)))
    interior = np.flatnonzero(counts == 2)
    nonmanifold = np.flatnonzero(counts > 2)
    if nonmanifold.size:
        warnings.warn(f"{nonmanifold.size} non-manifold edge(s) excluded from bending", stacklevel=2)

    h0 = he_sorted[starts[interior]]
    h1 = he_sorted[starts[interior] + 1]
    fa, fb = h0 // 3, h1 // 3
    pair_faces = np.stack([fa, fb], axis=1).astype(np.int64)
    pair_edge_vertices = half[h0].astype(np.int64)

    rest = mesh.rest
    el = np.linalg.norm(rest[pair_edge_vertices[:, 1]] - rest[pair_edge_vertices[:, 0]], axis=1)
    areas = triangle_areas(rest, f)
    area_sum = areas[fa] + areas[fb]
    angle = dihedral_angles(rest, f, pair_faces, pair_edge_vertices) if len(interior) else np.zeros(0)

    both = np.concatenate([edges, edges[:, ::-1]])
    srt = np.lexsort((both[:, 1], both[:, 0]))
    both = both[srt]
    offsets = np.searchsorted(both[:, 0], np.arange(mesh.n_vertices + 1))

    ro = _readonly
    return Topology(
        n_vertices=mesh.n_vertices,
        faces=mesh.faces,
        edges=ro(edges.astype(np.int64)),
        face_edges=ro(face_edges.astype(np.int64)),
        pair_faces=ro(pair_faces),
        pair_edge=ro(interior.astype(np.int64)),
        pair_edge_vertices=ro(pair_edge_vertices),
        pair_rest_edge_length=ro(el),
        pair_rest_area_sum=ro(area_sum),
        pair_rest_angle=ro(angle),
        adjacency_offsets=ro(offsets.astype(np.int64)),
        adjacency_indices=ro(both[:, 1].astype(np.int64)),
        nonmanifold_edges=ro(edges[nonmanifold].astype(np.int64).reshape(-1, 2)),
        boundary_edges=ro(edges[counts == 1].astype(np.int64).reshape(-1, 2)),
    )


@dataclass(frozen=True)
class SurfacePoint:
    face: int
    bary: tuple

    def __post_init__(self):
        b = np.asarray(self.bary, dtype=np.float64)
        if b.shape != (3,) or np.any(b < -1e-9) or abs(b.sum() - 1.0) > 1e-9:
            raise InvalidSurfacePoint(f"barycentric coordinates {tuple(b)} are off the simplex")
        object.__setattr__(self, "bary", tuple(float(c) for c in b))


def barycentric_positions(x: np.ndarray, faces: np.ndarray, face_idx: np.ndarray,
                          bary: np.ndarray) -> np.ndarray:
    return np.einsum("nk,nkd->nd", bary, x[faces[face_idx]])


def surface_point_position(mesh: TriangleMesh, sp: SurfacePoint) -> np.ndarray:
    if not 0 <= sp.face < mesh.n_faces:
        raise InvalidSurfacePoint(f"face {sp.face} out of range for {mesh.n_faces} faces")
    return np.asarray(sp.bary) @ mesh.vertices[mesh.faces[sp.face]]


@dataclass(frozen=True)
class LocalFrame:
    rotation: np.ndarray
    origin: np.ndarray
    scale: float


def face_frames(x: np.ndarray, faces: np.ndarray):
    """Per-face rotation ``[edge, normal x edge, normal]`` and scale ``(B+H)/2``.

    The designated edge runs from corner 0 to corner 1 of each face.
    Returns ``(R, k)`` with shapes ``(F, 3, 3)`` and ``(F,)``.
    """
    p = x[faces]
    u = p[:, 1] - p[:, 0]
    v = p[:, 2] - p[:, 0]
    nvec = np.cross(u, v)
    lu = np.linalg.norm(u, axis=1)
    ln = np.linalg.norm(nvec, axis=1)
    t1 = u / lu[:, None]
    n = nvec / ln[:, None]
    t2 = np.cross(n, t1)
    R = np.stack([t1, t2, n], axis=2)
    k = 0.5 * (lu + ln / lu)
    return R, k


def face_frames_backward(x: np.ndarray, faces: np.ndarray, g_R: np.ndarray, g_k: np.ndarray) -> np.ndarray:
    """Vertex gradient given gradients w.r.t. per-face ``R`` and ``k``."""
    p = x[faces]
    u = p[:, 1] - p[:, 0]
    v = p[:, 2] - p[:, 0]
    nvec = np.cross(u, v)
    lu = np.linalg.norm(u, axis=1)[:, None]
    ln = np.linalg.norm(nvec, axis=1)[:, None]
    t1 = u / lu
    n = nvec / ln
    g_t1 = g_R[:, :, 0].copy()
    g_t2 = g_R[:, :, 1]
    g_n = g_R[:, :, 2].copy()
    # t2 = n x t1
    g_n += np.cross(t1, g_t2)
    g_t1 += np.cross(g_t2, n)
    gk = g_k[:, None]
    # k = (|u| + |N| / |u|) / 2
    g_u = (g_t1 - t1 * np.einsum("ij,ij->i", t1, g_t1)[:, None]) / lu
    g_u += 0.5 * gk * t1 * (1.0 - ln / lu**2)
    g_N = (g_n - n * np.einsum("ij,ij->i", n, g_n)[:, None]) / ln
    g_N += 0.5 * gk * n / lu
    g_v = np.cross(g_N, u)
    g_u += np.cross(v, g_N)
    per_corner = np.stack([-(g_u + g_v), g_u, g_v], axis=1)
    return scatter_add(len(x), faces.ravel(), per_corner.reshape(-1, 3))


def local_frame(mesh: TriangleMesh, sp: SurfacePoint) -> LocalFrame:
    if not 0 <= sp.face < mesh.n_faces:
        raise InvalidSurfacePoint(f"face {sp.face} out of range")
    tri = mesh.faces[sp.face:sp.face + 1]
    if triangle_areas(mesh.vertices, tri)[0] <= DEGENERATE_AREA:
        raise DegenerateFace(f"face {sp.face} has zero area")
    R, k = face_frames(mesh.vertices, tri)
    return LocalFrame(rotation=R[0], origin=surface_point_position(mesh, sp), scale=float(k[0]))


@dataclass(frozen=True)
class FaceRestState:
    dm_inv: np.ndarray
    area: float
    thickness: float

    @property
    def volume(self) -> float:
        return self.area * self.thickness


@dataclass(frozen=True)
class FaceRestStates:
    """Rest states for all faces: inverse 2D edge matrices, areas, thickness."""

    dm_inv: np.ndarray
    area: np.ndarray
    thickness: float

    def __len__(self):
        return len(self.area)

    def __getitem__(self, i) -> FaceRestState:
        return FaceRestState(self.dm_inv[i], float(self.area[i]), self.thickness)

    @property
    def volume(self) -> np.ndarray:
        return self.area * self.thickness


def rest_states_from_edge_lengths(l01, l12, l20, thickness: float = DEFAULT_THICKNESS) -> FaceRestStates:
    """Lay each triangle out in 2D from its three side lengths."""
    l01, l12, l20 = (np.asarray(a, dtype=np.float64) for a in (l01, l12, l20))
    if thickness <= 0:
        raise ValueError("thickness must be positive")
    px = (l01**2 + l20**2 - l12**2) / (2.0 * l01)
    py2 = l20**2 - px**2
    if np.any(py2 <= 0):
        raise DegenerateFace("rest edge lengths violate the triangle inequality")
    py = np.sqrt(py2)
    area = 0.5 * l01 * py
    if np.any(area <= DEGENERATE_AREA):
        raise DegenerateFace("degenerate rest face")
    dm_inv = np.zeros((len(area), 2, 2))
    dm_inv[:, 0, 0] = 1.0 / l01
    dm_inv[:, 0, 1] = -px / (l01 * py)
    dm_inv[:, 1, 1] = 1.0 / py
    return FaceRestStates(dm_inv=dm_inv, area=area, thickness=float(thickness))


def build_face_rest_states(mesh: TriangleMesh, thickness: float = DEFAULT_THICKNESS) -> FaceRestStates:
    x = mesh.rest
    p = x[mesh.faces]
    l01 = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    l12 = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
    l20 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    return rest_states_from_edge_lengths(l01, l12, l20, thickness)


def deformation_gradients(x: np.ndarray, faces: np.ndarray, rest: FaceRestStates) -> np.ndarray:
    p = x[faces]
    ds = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    return ds @ rest.dm_inv


def deformation_gradient(current: TriangleMesh, rest: Optional[FaceRestStates], face: int) -> np.ndarray:
    """3x2 map from rest in-plane coordinates to current edge vectors."""
    if rest is None or not 0 <= face < len(rest):
        raise MissingRestState(f"no rest state for face {face}")
    tri = current.faces[face:face + 1]
    return deformation_gradients(current.vertices, tri, FaceRestStates(rest.dm_inv[face:face + 1],
                                                                       rest.area[face:face + 1],
                                                                       rest.thickness))[0]
