"""Classical explicit cloth stepper, behavior fitting, untangling and resizing.

Time is measured in frames: velocities are metres per frame and one call to
:func:`step` advances exactly one frame, ``x_{t+1} = x_t + v_t + a``,
``v_{t+1} = x_{t+1} - x_t``. Accelerations come from the membrane, bending and
penalty energies; the frame is split into ``substeps`` symplectic substeps with
collision re-pairing and a position projection after each one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .bvh import BVH
from .energies import (MaterialParams, MeshCollider, as_collider, bending_energy, pairwise_sum,
                       strain_energy)
from .errors import DegenerateFace, DivergedSimulation, InvalidScaleField, TopologyMismatch, ValidationError
from .mesh import (DEFAULT_THICKNESS, FaceRestStates, Topology, TriangleMesh, build_topology, face_normals,
                   positions_of, rest_states_from_edge_lengths, scatter_add, triangle_areas)

log = logging.getLogger(__name__)

GRAVITY = 9.81
FRAME_DT = 1.0 / 30.0


@dataclass
class SimState:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.x.shape != self.v.shape or self.x.ndim != 2 or self.x.shape[1] != 3:
            raise ValidationError(f"positions {self.x.shape} and velocities {self.v.shape} must both be (N, 3)")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v))):
            raise DivergedSimulation("non-finite simulation state")

    @classmethod
    def at_rest(cls, x) -> "SimState":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.copy(), np.zeros_like(x))


@dataclass
class MaterialField:
    """Per-node multipliers ``(bending, lambda, mu, mass density)``."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != 4:
            raise ValidationError("material field must be (N, 4)")
        if not np.all(self.values > 0) or not np.all(np.isfinite(self.values)):
            raise ValidationError("material multipliers must be positive and finite")

    @classmethod
    def uniform(cls, n: int, m=(1.0, 1.0, 1.0, 1.0)) -> "MaterialField":
        return cls(np.tile(np.asarray(m, dtype=np.float64), (n, 1)))

    def __len__(self):
        return len(self.values)

    def scaled(self, factors) -> "MaterialField":
        return MaterialField(self.values * np.asarray(factors, dtype=np.float64))


@dataclass(frozen=True)
class RestGeometry:
    """Rest edge lengths (one per unique edge) plus rest dihedral angles."""

    topology: Topology
    edge_lengths: np.ndarray
    rest_angles: np.ndarray
    thickness: float = DEFAULT_THICKNESS

    def __post_init__(self):
        el = np.asarray(self.edge_lengths, dtype=np.float64)
        if el.shape != (self.topology.n_edges,):
            raise ValidationError(f"{el.shape} rest lengths for {self.topology.n_edges} edges")
        if not np.all(el > 0):
            raise ValidationError("rest edge lengths must be positive")
        object.__setattr__(self, "edge_lengths", el)
        object.__setattr__(self, "rest_angles", np.asarray(self.rest_angles, dtype=np.float64))
        object.__setattr__(self, "face_states", None)

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, thickness: float = DEFAULT_THICKNESS,
                  topology: Optional[Topology] = None) -> "RestGeometry":
        top = build_topology(mesh) if topology is None else topology
        x = mesh.rest
        el = np.linalg.norm(x[top.edges[:, 1]] - x[top.edges[:, 0]], axis=1)
        return cls(top, el, np.array(top.pair_rest_angle), thickness)

    @property
    def faces(self) -> np.ndarray:
        return self.topology.faces

    @property
    def n_vertices(self) -> int:
        return self.topology.n_vertices

    def face_rest_states(self) -> FaceRestStates:
        fs = self.face_states
        if fs is None:
            fe = self.topology.face_edges
            el = self.edge_lengths
            fs = rest_states_from_edge_lengths(el[fe[:, 0]], el[fe[:, 1]], el[fe[:, 2]], self.thickness)
            object.__setattr__(self, "face_states", fs)
        return fs

    def bending_weights(self) -> np.ndarray:
        top = self.topology
        area = self.face_rest_states().area
        e = self.edge_lengths[top.pair_edge]
        return e**2 / (area[top.pair_faces[:, 0]] + area[top.pair_faces[:, 1]])

    def with_edge_lengths(self, edge_lengths) -> "RestGeometry":
        return RestGeometry(self.topology, edge_lengths, self.rest_angles, self.thickness)


@dataclass
class BodyMotion:
    """Body meshes, one per frame, sharing faces and vertex count."""

    frames: list

    def __post_init__(self):
        self.frames = list(self.frames)
        if self.frames:
            n = self.frames[0].n_vertices
            for i, m in enumerate(self.frames):
                if m.n_vertices != n:
                    raise TopologyMismatch(f"body frame {i} has {m.n_vertices} vertices, expected {n}")

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> TriangleMesh:
        return self.frames[i]


@dataclass
class SimConfig:
    substeps: int = 8
    gravity: tuple = (0.0, -GRAVITY, 0.0)
    frame_dt: float = FRAME_DT
    material: MaterialParams = field(default_factory=MaterialParams)
    density: float = 0.3
    eps_body: float = 3e-3
    body_stiffness: float = 1e3
    collision_radius: float = 0.05
    projection_iters: int = 2
    damping: float = 0.0
    repulsion_distance: float = 2e-3
    repulsion_stiffness: float = 1e3

    def gravity_per_frame2(self) -> np.ndarray:
        return np.asarray(self.gravity, dtype=np.float64) * self.frame_dt**2


@dataclass
class Pins:
    """Kinematic vertices: ``indices`` follow ``target`` over the step."""

    indices: np.ndarray
    target: np.ndarray


def lumped_masses(rest: RestGeometry, material: MaterialField, density: float) -> np.ndarray:
    area = rest.face_rest_states().area
    per_corner = np.repeat(area / 3.0, 3)
    base = np.bincount(rest.faces.ravel(), weights=per_corner, minlength=rest.n_vertices)
    return density * base * material.values[:, 3]


def stable_substeps(material: MaterialField, rest: RestGeometry, cfg: SimConfig, mass=None,
                    safety: float = 0.5) -> int:
    """Substeps needed so the stiffest membrane mode satisfies ``omega * h <= 2 * safety``."""
    fs = rest.face_rest_states()
    face_m = material.values[rest.faces].mean(axis=1)
    mod = (cfg.material.lame_lambda * face_m[:, 1] + 2.0 * cfg.material.lame_mu * face_m[:, 2])
    k = mod * fs.area * cfg.material.thickness * np.einsum("nij,nij->n", fs.dm_inv, fs.dm_inv)
    kv = np.bincount(rest.faces.ravel(), weights=np.repeat(k, 3), minlength=rest.n_vertices)
    if mass is None:
        mass = lumped_masses(rest, material, cfg.density)
    omega = np.sqrt(2.0 * np.max(kv / mass)) * cfg.frame_dt
    return int(np.ceil(omega / (2.0 * safety)))


def internal_energy(x: np.ndarray, material: MaterialField, rest: RestGeometry, cfg: SimConfig,
                    with_grad: bool = True):
    """Bending plus membrane energy with per-element multipliers (J)."""
    faces = rest.faces
    top = rest.topology
    mv = material.values
    face_m = mv[faces].mean(axis=1)
    e = strain_energy(x, faces, rest.face_rest_states(), cfg.material, with_grad,
                      lambda_scale=face_m[:, 1], mu_scale=face_m[:, 2])
    if len(top.pair_faces) and cfg.material.bending_stiffness > 0:
        pair_m = 0.5 * (face_m[top.pair_faces[:, 0], 0] + face_m[top.pair_faces[:, 1], 0])
        b = bending_energy(x, top, with_grad, weights=rest.bending_weights(), rest_angle=rest.rest_angles,
                           pair_scale=cfg.material.bending_stiffness * pair_m)
        e = e + b
    return e


def _closest_signed(colliders, x, max_dist):
    """Per vertex the most penetrating (smallest signed distance) contact over all colliders."""
    n = len(x)
    best_d = np.full(n, np.inf)
    best_w = np.zeros((n, 3))
    best_n = np.zeros((n, 3))
    for col in colliders:
        face, pt, _, _ = col.bvh.closest_points(x, max_dist)
        hit = face >= 0
        if not hit.any():
            continue
        nrm = col.normals[face[hit]]
        d = np.einsum("ij,ij->i", x[hit] - pt[hit], nrm)
        idx = np.flatnonzero(hit)
        better = d < best_d[idx]
        j = idx[better]
        best_d[j] = d[better]
        best_w[j] = pt[hit][better]
        best_n[j] = nrm[better]
    return best_d, best_w, best_n


def _group_contacts(x, faces, groups, group_bvhs, radius):
    """Unsigned nearest contact of each vertex with cloth of other groups."""
    n = len(x)
    d = np.full(n, np.inf)
    direction = np.zeros((n, 3))
    for g, (bvh, face_ids) in group_bvhs.items():
        sel = np.flatnonzero(groups == g)
        face, pt, _, dist = bvh.closest_points(x[sel], radius)
        hit = face >= 0
        if not hit.any():
            continue
        idx = sel[hit]
        dv = x[idx] - pt[hit]
        dd = dist[hit]
        ok = dd > 1e-12
        d[idx[ok]] = dd[ok]
        direction[idx[ok]] = dv[ok] / dd[ok, None]
    return d, direction


def _layered_contacts(x, faces, groups, group_bvhs, radius):
    """Signed contact of each vertex with cloth of other layers.

    ``groups`` are layer ranks (larger is further out). A vertex must stay on
    the outer side (along the face normal) of lower-ranked cloth and on the
    inner side of higher-ranked cloth; the returned distance is negative when
    it has crossed and ``direction`` points back to the allowed side.
    """
    n = len(x)
    d = np.full(n, np.inf)
    direction = np.zeros((n, 3))
    for g, (bvh, face_ids) in group_bvhs.items():
        sel = np.flatnonzero(groups == g)
        face, pt, _, _ = bvh.closest_points(x[sel], radius)
        hit = face >= 0
        if not hit.any():
            continue
        idx = sel[hit]
        f = faces[face_ids[face[hit]]]
        nrm = face_normals(x, f)
        side = np.sign(g - groups[f[:, 0]])[:, None]
        d[idx] = np.einsum("ij,ij->i", x[idx] - pt[hit], side * nrm)
        direction[idx] = side * nrm
    return d, direction


def step(state: SimState, material: MaterialField, rest: RestGeometry, body=None, solids: Sequence = (),
         cfg: Optional[SimConfig] = None, pins: Optional[Pins] = None, body_prev=None,
         groups: Optional[np.ndarray] = None, layered: bool = False) -> SimState:
    """Advance one frame.

    ``body`` is the body at the end of the frame; when ``body_prev`` is given
    the body is interpolated linearly across substeps. ``solids`` are static
    meshes handled like the body. ``groups`` labels vertices of separate
    garments, enabling cloth-cloth repulsion between different labels. With
    ``layered`` the labels are layer ranks and contacts are one-sided (see
    :func:`_layered_contacts`), so cloth that has crossed is pushed back.
    """
    cfg = cfg or SimConfig()
    x0 = state.x
    n = len(x0)
    if len(material) != n or rest.n_vertices != n:
        raise ValidationError(f"sizes differ: {n} nodes, {len(material)} materials, {rest.n_vertices} rest nodes")
    mass = lumped_masses(rest, material, cfg.density)
    N = max(int(cfg.substeps), stable_substeps(material, rest, cfg, mass))
    h = 1.0 / N
    inv_m = np.where(mass > 0, 1.0 / np.where(mass > 0, mass, 1.0), 0.0)
    g = cfg.gravity_per_frame2()
    dt2 = cfg.frame_dt**2

    colliders = []
    body_col = None
    if body is not None:
        body_col = MeshCollider(body if isinstance(body, TriangleMesh) else body.mesh())
        colliders.append(body_col)
        body_end = body_col.vertices.copy()
        body_start = positions_of(body_prev) if body_prev is not None else body_end
    for s in solids:
        colliders.append(as_collider(s))

    group_bvhs = {}
    if layered:
        def cloth_contacts(x):
            return _layered_contacts(x, rest.faces, groups, group_bvhs, cfg.collision_radius)
    else:
        def cloth_contacts(x):
            return _group_contacts(x, rest.faces, groups, group_bvhs, cfg.repulsion_distance)
    if groups is not None:
        groups = np.asarray(groups)
        face_group = groups[rest.faces[:, 0]]
        for gl in np.unique(groups):
            other = np.flatnonzero(face_group != gl)
            if len(other):
                group_bvhs[gl] = (BVH(x0, rest.faces[other]), other)

    pinned = np.zeros(n, dtype=bool)
    if pins is not None:
        pinned[pins.indices] = True
        pin_start = x0[pins.indices].copy()
    free = ~pinned

    def accel(x, frac):
        e = internal_energy(x, material, rest, cfg)
        grad = e.grad
        if colliders:
            d, w, nrm = _closest_signed(colliders, x, cfg.collision_radius)
            pen = np.where(np.isfinite(d), np.maximum(cfg.eps_body - np.where(np.isfinite(d), d, 0.0), 0.0), 0.0)
            grad = grad - (3.0 * cfg.body_stiffness * pen**2)[:, None] * nrm
        if group_bvhs:
            for bvh, face_ids in group_bvhs.values():
                bvh.refit(x)
            d, dirn = cloth_contacts(x)
            pen = np.where(np.isfinite(d), np.maximum(cfg.repulsion_distance - np.where(np.isfinite(d), d, 0.0), 0.0), 0.0)
            grad = grad - (3.0 * cfg.repulsion_stiffness * pen**2)[:, None] * dirn
        a = -grad * inv_m[:, None] * dt2
        a[pinned] = 0.0
        return a

    def project(x, u):
        for _ in range(cfg.projection_iters):
            if group_bvhs:
                for bvh, _ in group_bvhs.values():
                    bvh.refit(x)
                d, dirn = cloth_contacts(x)
                close = np.isfinite(d) & (d < cfg.repulsion_distance) & free
                x[close] += 0.5 * (cfg.repulsion_distance - d[close])[:, None] * dirn[close]
            if colliders:
                d, w, nrm = _closest_signed(colliders, x, cfg.collision_radius)
                inside = np.isfinite(d) & (d < cfg.eps_body) & free
                if not inside.any():
                    break
                x[inside] += (cfg.eps_body - d[inside])[:, None] * nrm[inside]
                un = np.einsum("ij,ij->i", u[inside], nrm[inside])
                u[inside] -= np.minimum(un, 0.0)[:, None] * nrm[inside]
        return x, u

    g_free = np.where(pinned[:, None], 0.0, g)
    x = x0.copy()
    u = state.v.copy()
    for i in range(N):
        frac = (i + 1) * h
        if body_col is not None and body_prev is not None:
            body_col.update((1.0 - frac + h) * body_start + (frac - h) * body_end if i else body_start)
        try:
            a = accel(x, frac)
        except DegenerateFace as exc:
            raise DivergedSimulation(f"substep {i}: {exc}") from exc
        # the first gravity kick is (1 + h) / 2 so that free fall lands exactly on x + v + g
        u = u + h * a + ((1.0 + h) / 2.0 if i == 0 else h) * g_free
        x = x + h * u
        if pins is not None:
            x[pins.indices] = (1.0 - frac) * pin_start + frac * pins.target
            u[pins.indices] = (pins.target - pin_start)
        if body_col is not None and body_prev is not None:
            body_col.update((1.0 - frac) * body_start + frac * body_end)
        x, u = project(x, u)
        if not np.all(np.isfinite(x)):
            raise DivergedSimulation(f"non-finite positions in substep {i}")
    v = (x - x0) * (1.0 - cfg.damping)
    if not (np.all(np.isfinite(x)) and np.all(np.abs(x) < 1e6)):
        raise DivergedSimulation("simulation diverged")
    return SimState(x, v)


def simulate(state: SimState, material: MaterialField, rest: RestGeometry, motion: Optional[BodyMotion] = None,
             n_frames: Optional[int] = None, cfg: Optional[SimConfig] = None, solids: Sequence = (),
             pin_indices=None, pin_targets=None, groups=None, static_body=None) -> np.ndarray:
    """Roll out ``n_frames`` frames; returns ``(n_frames + 1, N, 3)`` positions, frame 0 first.

    With a ``motion`` of length T the body for the step ``t -> t+1`` is
    ``motion[t+1]`` (interpolated from ``motion[t]``). ``pin_targets`` has one
    ``(k, 3)`` array per frame.
    """
    cfg = cfg or SimConfig()
    if n_frames is None:
        n_frames = len(motion) - 1 if motion is not None else 0
    out = [state.x.copy()]
    for t in range(n_frames):
        body = body_prev = None
        if motion is not None:
            body, body_prev = motion[min(t + 1, len(motion) - 1)], motion[min(t, len(motion) - 1)]
        elif static_body is not None:
            body = static_body
        pins = None
        if pin_indices is not None:
            pins = Pins(np.asarray(pin_indices), np.asarray(pin_targets[t + 1], dtype=np.float64))
        try:
            state = step(state, material, rest, body, solids, cfg, pins, body_prev, groups)
        except DivergedSimulation as exc:
            raise DivergedSimulation(f"frame {t}: {exc}") from exc
        out.append(state.x.copy())
    return np.stack(out)


def relax(x, material: MaterialField, rest: RestGeometry, n_frames: int = 200, cfg: Optional[SimConfig] = None,
          body=None, solids: Sequence = (), groups=None, damping: float = 0.2, tol: float = 0.0) -> np.ndarray:
    """Damped simulation from rest velocity; stops early once motion falls below ``tol`` m/frame."""
    cfg = replace(cfg or SimConfig(), damping=damping)
    state = SimState.at_rest(x)
    for _ in range(n_frames):
        state = step(state, material, rest, body, solids, cfg, groups=groups)
        if tol > 0 and np.abs(state.v).max() < tol:
            break
    return state.x


# ------------------------------------------------------------------- resizing

def resize(rest: RestGeometry, scale_field) -> RestGeometry:
    """Scale each rest edge by the mean of its endpoint scales; rest angles kept."""
    s = np.asarray(scale_field, dtype=np.float64)
    if s.shape != (rest.n_vertices,):
        raise InvalidScaleField(f"scale field has shape {s.shape}, expected ({rest.n_vertices},)")
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise InvalidScaleField("scale field must be positive and finite")
    e = rest.topology.edges
    return rest.with_edge_lengths(rest.edge_lengths * 0.5 * (s[e[:, 0]] + s[e[:, 1]]))


# ----------------------------------------------------------- behavior fitting

def smooth_vertex_field(values: np.ndarray, topology: Topology, rounds: int = 3) -> np.ndarray:
    """Uniform Laplacian smoothing (each round averages a vertex with its neighbors)."""
    v = np.asarray(values, dtype=np.float64)
    off, idx = topology.adjacency_offsets, topology.adjacency_indices
    deg = np.diff(off)
    owner = np.repeat(np.arange(topology.n_vertices), deg)
    for _ in range(rounds):
        nb = np.bincount(owner, weights=v[idx], minlength=topology.n_vertices)
        v = (v + nb) / (1.0 + deg)
    return v


# log material multipliers from (log bending/mass, log lambda/mass, log mu/mass, log mass):
# scaling every stiffness together with the mass leaves contact-free motion
# unchanged, so that near-degenerate direction is a single coordinate here
_RATIO_TO_LOG = np.array([[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 1.0], [0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 0.0, 1.0]])


@dataclass
class BehaviorParams:
    """Search space of :func:`fit_behavior`: 3 log stiffness/mass ratios, log mass, rest-scale coefficients."""

    log_ratios: np.ndarray
    scale_coeffs: np.ndarray

    @property
    def log_material(self) -> np.ndarray:
        return _RATIO_TO_LOG @ self.log_ratios

    def vector(self) -> np.ndarray:
        return np.concatenate([self.log_ratios, self.scale_coeffs])

    @classmethod
    def from_vector(cls, v) -> "BehaviorParams":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:4].copy(), v[4:].copy())


def _scale_basis(rest_x: np.ndarray) -> np.ndarray:
    c = rest_x - rest_x.mean(axis=0)
    ext = np.abs(c).max(axis=0)
    c = c / np.where(ext > 0, ext, 1.0)
    return np.concatenate([np.ones((len(rest_x), 1)), c], axis=1)


def apply_behavior_params(p: BehaviorParams, material: MaterialField, rest: RestGeometry, basis: np.ndarray):
    mat = material.scaled(np.exp(p.log_material))
    if np.any(p.scale_coeffs != 0):
        field_ = np.exp(smooth_vertex_field(basis @ p.scale_coeffs, rest.topology, 3))
        rest = resize(rest, field_)
    return mat, rest


def rollout(sequence: np.ndarray, motion: Optional[BodyMotion], material: MaterialField, rest: RestGeometry,
            cfg: Optional[SimConfig] = None, pin_indices=None) -> np.ndarray:
    """Simulate from ``sequence[0]`` at zero velocity for ``len(sequence) - 1`` frames.

    Vertices in ``pin_indices`` are kinematic and follow ``sequence``.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    targets = None if pin_indices is None else seq[:, np.asarray(pin_indices)]
    return simulate(SimState.at_rest(seq[0]), material, rest, motion, len(seq) - 1, cfg,
                    pin_indices=pin_indices, pin_targets=targets)


def rollout_l2(sequence: np.ndarray, motion: Optional[BodyMotion], material: MaterialField, rest: RestGeometry,
               cfg: Optional[SimConfig] = None, pin_indices=None) -> float:
    """Mean squared vertex error of :func:`rollout` against ``sequence`` (frames after the first)."""
    seq = np.asarray(sequence, dtype=np.float64)
    if len(seq) < 2:
        return 0.0
    try:
        pred = rollout(seq, motion, material, rest, cfg, pin_indices)
    except (DivergedSimulation, ValidationError):
        return np.inf
    return float(np.mean(np.sum((pred[1:] - seq[1:]) ** 2, axis=2)))


@dataclass
class FitReport:
    initial_l2: float
    final_l2: float
    evaluations: int
    params: BehaviorParams
    history: list = field(default_factory=list)


_L2_FLOOR = 1e-24  # m^2, i.e. 1e-12 m rms: below this a sequence is already matched


class _BudgetSpent(Exception):
    pass


def fit_behavior(registered, body: Optional[BodyMotion], init_material: MaterialField, init_rest: RestGeometry,
                 cfg: Optional[SimConfig] = None, max_evals: int = 200, fit_rest: bool = True,
                 return_report: bool = False, pin_indices=None, method: str = "lsq", diff_step: float = 1e-2,
                 step0: float = 0.5, min_step: float = 1e-3):
    """Fit material multipliers and a smooth rest-scale field to a registered sequence.

    The objective is the rollout L2 (:func:`rollout_l2`). ``method="lsq"``
    runs a finite-difference Gauss-Newton trust-region search on the rollout
    residuals; ``method="coordinate"`` runs a derivative-free coordinate
    descent (step ``step0``, halved down to ``min_step``). Either way at most
    ``max_evals`` rollouts are made and the best parameters seen are kept, so
    the result is never worse than the initialization. ``registered`` is a
    ``(T, N, 3)`` array or an object with a ``positions`` list;
    ``pin_indices`` vertices follow it during rollouts.
    """
    seq = getattr(registered, "positions", registered)
    frames = [np.asarray(f, dtype=np.float64) for f in seq]
    if len(frames) < 2:
        raise ValidationError("fit_behavior needs at least two frames")
    n = len(frames[0])
    for i, f in enumerate(frames):
        if f.shape != (n, 3):
            raise TopologyMismatch(f"frame {i} has shape {f.shape}, expected ({n}, 3)")
    if n != init_rest.n_vertices or len(init_material) != n:
        raise TopologyMismatch("registered frames do not match the garment topology")
    if method not in ("lsq", "coordinate"):
        raise ValidationError(f"unknown fitting method {method!r}")
    seq = np.stack(frames)
    basis = _scale_basis(seq[0])
    n_coords = 4 + (basis.shape[1] if fit_rest else 0)
    n_res = (len(seq) - 1) * n * 3
    targets = seq[1:].ravel()
    norm = 1.0 / np.sqrt((len(seq) - 1) * n)
    state = {"evals": 0, "best": np.inf, "best_v": np.zeros(n_coords), "history": []}

    def to_params(v):
        full = np.zeros(4 + basis.shape[1])
        full[:n_coords] = v
        return BehaviorParams.from_vector(full)

    def residuals(v):
        if state["evals"] >= max_evals:
            raise _BudgetSpent
        state["evals"] += 1
        try:
            mat, rst = apply_behavior_params(to_params(v), init_material, init_rest, basis)
            pred = rollout(seq, body, mat, rst, cfg, pin_indices)[1:].ravel()
            r = (pred - targets) * norm
            val = float(r @ r)
        except (DivergedSimulation, ValidationError):
            r, val = np.full(n_res, 1e3 * norm), np.inf
        if val < state["best"]:
            state["best"], state["best_v"] = val, np.array(v, dtype=np.float64)
        state["history"].append(state["best"])
        return r

    v0 = np.zeros(n_coords)
    residuals(v0)
    initial = state["best"]
    scale = np.ones(n_coords)
    scale[4:] = 0.05
    try:
        if initial > _L2_FLOOR and np.isfinite(initial):
            if method == "lsq":
                from scipy.optimize import least_squares
                least_squares(residuals, v0, diff_step=diff_step, x_scale=scale, max_nfev=max_evals)
            else:
                _coordinate_descent(lambda v: float(np.sum(residuals(v) ** 2)), v0, step0 * scale, min_step,
                                    state)
    except _BudgetSpent:
        pass
    p = to_params(state["best_v"])
    best = state["best"]
    report = FitReport(initial, best, state["evals"], p, state["history"])
    log.info("fit_behavior: L2 %.4e -> %.4e in %d rollouts", initial, best, state["evals"])
    # round-off level gains do not count as an improvement
    if not best < initial * (1.0 - 1e-9) - _L2_FLOOR:
        report.params, report.final_l2 = to_params(v0), initial
        mat, rst = init_material, init_rest
    else:
        mat, rst = apply_behavior_params(p, init_material, init_rest, basis)
    return (mat, rst, report) if return_report else (mat, rst)


def _coordinate_descent(f, v, steps, min_step, state):
    """Pattern search along coordinate axes; keeps moving while a direction improves."""
    best = state["best"]
    steps = np.array(steps, dtype=np.float64)
    while np.any(steps > min_step) and best > 0:
        improved_any = False
        for k in range(len(v)):
            if steps[k] <= min_step:
                continue
            for sign in (1.0, -1.0):
                cand = v.copy()
                cand[k] += sign * steps[k]
                val = f(cand)
                if val < best:
                    while val < best:
                        v, best = cand, val
                        cand = v.copy()
                        cand[k] += sign * steps[k]
                        val = f(cand)
                    improved_any = True
                    break
            else:
                steps[k] *= 0.5
        if not improved_any:
            steps *= 0.5
    return v


# ------------------------------------------------------------------ untangling

@dataclass
class Garment:
    mesh: TriangleMesh
    rest: RestGeometry
    material: Optional[MaterialField] = None

    def __post_init__(self):
        if self.material is None:
            self.material = MaterialField.uniform(self.mesh.n_vertices)

    @property
    def positions(self) -> np.ndarray:
        return self.mesh.vertices


def _as_garment(g) -> Garment:
    if isinstance(g, Garment):
        return g
    mesh, rest = g[0], g[1]
    return Garment(mesh, rest, g[2] if len(g) > 2 else None)


def untangle_config(cfg: Optional[SimConfig] = None) -> SimConfig:
    base = cfg or SimConfig()
    return replace(base, gravity=(0.0, 0.0, 0.0), damping=max(base.damping, 0.1))


def untangle_one(outer, inners: Sequence, n_epochs: int = 2, body=None, cfg: Optional[SimConfig] = None,
                 frames_per_stage: int = 30):
    """Untangle ``outer`` from the garments beneath it.

    Each epoch simulates the outer garment with the inner ones as static
    solids, then all garments together as cloth with mutual repulsion, each
    for ``frames_per_stage`` frames on a static body. Returns updated
    ``[outer, *inners]`` garments (meshes with new vertices, same rest).
    """
    cfg = untangle_config(cfg)
    outer = _as_garment(outer)
    inners = [_as_garment(g) for g in inners]
    garments = [outer] + inners
    for epoch in range(n_epochs):
        solids = [TriangleMesh(g.positions, g.mesh.faces) for g in inners]
        state = SimState.at_rest(outer.positions)
        try:
            for _ in range(frames_per_stage):
                state = step(state, outer.material, outer.rest, body, solids, cfg)
        except DivergedSimulation as exc:
            raise DivergedSimulation(f"stage 1: {exc}", stage=1, epoch=epoch) from exc
        garments[0] = Garment(outer.mesh.with_positions(state.x), outer.rest, outer.material)

        joint, mat, rest, groups, offsets = _concatenate(garments)
        # layer ranks: the outer garment above all inners, inners in their given order
        ranks = np.where(groups == 0, len(garments), groups)
        state = SimState.at_rest(joint)
        try:
            for _ in range(frames_per_stage):
                state = step(state, mat, rest, body, (), cfg, groups=ranks, layered=True)
        except DivergedSimulation as exc:
            raise DivergedSimulation(f"stage 2: {exc}", stage=2, epoch=epoch) from exc
        garments = [Garment(g.mesh.with_positions(state.x[offsets[i]:offsets[i + 1]]), g.rest, g.material)
                    for i, g in enumerate(garments)]
        outer, inners = garments[0], garments[1:]
    return garments


def _concatenate(garments: Sequence[Garment]):
    offsets = np.cumsum([0] + [g.mesh.n_vertices for g in garments])
    faces = np.concatenate([g.mesh.faces + offsets[i] for i, g in enumerate(garments)])
    x = np.concatenate([g.positions for g in garments])
    rest_x = np.concatenate([g.mesh.rest for g in garments])
    mesh = TriangleMesh(rest_x, faces)
    top = build_topology(mesh)
    # carry each garment's own rest lengths and angles over to the joint topology
    el = np.empty(top.n_edges)
    key = {}
    for i, g in enumerate(garments):
        e = g.rest.topology.edges + offsets[i]
        for (a, b), L in zip(map(tuple, e), g.rest.edge_lengths):
            key[(a, b)] = L
    for j, (a, b) in enumerate(map(tuple, top.edges)):
        el[j] = key[(a, b)]
    angles = np.concatenate([g.rest.rest_angles for g in garments]) if len(top.pair_faces) else np.zeros(0)
    ang_key = {}
    face_off = np.cumsum([0] + [g.mesh.n_faces for g in garments])
    for i, g in enumerate(garments):
        for (fa, fb), ang in zip(map(tuple, g.rest.topology.pair_faces + face_off[i]), g.rest.rest_angles):
            ang_key[(fa, fb)] = ang
    angles = np.array([ang_key[tuple(pf)] for pf in top.pair_faces])
    rest = RestGeometry(top, el, angles, garments[0].rest.thickness)
    mat = MaterialField(np.concatenate([g.material.values for g in garments]))
    groups = np.repeat(np.arange(len(garments)), np.diff(offsets))
    return x, mat, rest, groups, offsets


def untangle_all(garments: Sequence, body=None, n_epochs: int = 2, cfg: Optional[SimConfig] = None,
                 frames_per_stage: int = 30):
    """Untangle garments ordered innermost first; each one is fitted over those before it."""
    gs = [_as_garment(g) for g in garments]
    for i in range(1, len(gs)):
        out = untangle_one(gs[i], gs[:i], n_epochs, body, cfg, frames_per_stage)
        gs = out[1:] + [out[0]] + gs[i + 1:]
    return gs
