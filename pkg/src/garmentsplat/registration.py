"""Tracking-based registration of a textured garment mesh to multi-view frames.

Each frame starts from the previous result and runs Adam on the vertex
positions against ``l1 * L_RGB + l2 * L_phys + l3 * L_contact``. The contact
term is the virtual-edge term during the first ``schedule_fraction`` of the
iterations and the body-penetration term afterwards.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .energies import (MaterialParams, VirtualEdges, bending_energy, body_penetration_energy,
                       build_virtual_edges, compute_collisions, gaussian_regularizer_arrays, strain_energy,
                       virtual_edge_energy)
from .errors import (DegenerateFace, DivergedOptimization, EmptyObservation, EmptyPointCloud, MissingBody,
                     ValidationError)
from .losses import rgb_loss
from .mesh import Topology, TriangleMesh, positions_of
from .render import Camera, rasterize, rasterize_backward, visibility_mask
from .simulator import RestGeometry
from .texture import (GaussianTexture, TextureBinding, attach, bind_texture, initial_texture, texture_params,
                      write_texture_params)

log = logging.getLogger(__name__)


@dataclass
class RegistrationConfig:
    lambda_rgb: float = 0.8
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1e3
    iterations_per_frame: int = 300
    schedule_fraction: float = 0.5
    use_schedule: bool = True
    learning_rate: float = 1e-4
    lr_final_ratio: float = 1.0
    eps_body: float = 3e-3
    ve_parallel_tol: float = 30.0
    camera_subset: Optional[int] = None
    seed: int = 0
    use_visibility: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    gate_with_mask: bool = False
    material: MaterialParams = field(default_factory=MaterialParams)
    collision_radius: float = float("inf")  # every vertex is paired with its closest body face
    body_warm_start: bool = False

    def __post_init__(self):
        for name in ("lambda_rgb", "lambda1", "lambda2", "lambda3", "learning_rate"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if not 0.0 <= self.lambda_rgb <= 1.0:
            raise ValidationError("lambda_rgb must lie in [0, 1]")
        if not 0.0 < self.schedule_fraction < 1.0:
            raise ValidationError("schedule_fraction must lie in (0, 1)")
        if self.iterations_per_frame < 0:
            raise ValidationError("iterations_per_frame must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown registration config keys: {sorted(unknown)}")
        d = dict(d)
        if "material" in d and isinstance(d["material"], dict):
            d["material"] = MaterialParams(**d["material"])
        if "background" in d:
            d["background"] = tuple(d["background"])
        return cls(**d)


@dataclass
class FrameObservation:
    images: list
    cameras: list
    masks: Optional[list] = None
    body: Optional[TriangleMesh] = None

    def __post_init__(self):
        self.images = [np.asarray(im, dtype=np.float64) for im in self.images]
        if len(self.images) != len(self.cameras):
            raise ValidationError(f"{len(self.images)} images for {len(self.cameras)} cameras")
        if self.masks is not None:
            self.masks = [np.asarray(m, dtype=bool) for m in self.masks]
            if len(self.masks) != len(self.cameras):
                raise ValidationError(f"{len(self.masks)} masks for {len(self.cameras)} cameras")
        for im, cam in zip(self.images, self.cameras):
            if im.shape != (cam.height, cam.width, 3):
                raise ValidationError(f"image {im.shape} does not match camera {cam.height}x{cam.width}")
        if self.body is not None and self.body.n_faces == 0:
            raise ValidationError("body mesh is empty")

    def __len__(self):
        return len(self.cameras)


@dataclass
class RegistrationResult:
    positions: list
    losses: list
    traces: list = field(default_factory=list)

    def __len__(self):
        return len(self.positions)


class Adam:
    """Adam with bias correction on a flat parameter array (or a dict of arrays)."""

    def __init__(self, shape_or_params, lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.is_dict = isinstance(shape_or_params, dict)
        if self.is_dict:
            self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in shape_or_params.items()}
            self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in shape_or_params.items()}
        else:
            self.m = np.zeros(shape_or_params)
            self.v = np.zeros(shape_or_params)
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def _update(self, p, g, m, v, lr):
        m *= self.b1
        m += (1 - self.b1) * g
        v *= self.b2
        v += (1 - self.b2) * g * g
        mh = m / (1 - self.b1**self.t)
        vh = v / (1 - self.b2**self.t)
        return p - lr * mh / (np.sqrt(vh) + self.eps)

    def step(self, params, grads, lr=None):
        self.t += 1
        if self.is_dict:
            lrs = self.lr if isinstance(self.lr, dict) else {k: self.lr for k in params}
            return {k: self._update(params[k], grads[k], self.m[k], self.v[k], lrs[k] if lr is None else lr * lrs[k])
                    for k in params}
        return self._update(params, grads, self.m, self.v, self.lr if lr is None else lr)


# ------------------------------------------------------------------------ ICP

def _kabsch(src: np.ndarray, dst: np.ndarray):
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    if len(src) < 2:
        return np.eye(3), cd - cs
    H = (src - cs).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def align_first_frame(template_points, target_points, max_rounds: int = 100):
    """Point-to-point ICP; returns ``(R, t)`` with ``target ~ R @ p + t``."""
    src = np.asarray(template_points, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise EmptyPointCloud("ICP needs non-empty point sets")
    tree = cKDTree(dst)
    R, t = np.eye(3), np.zeros(3)
    prev = None
    for _ in range(max_rounds):
        moved = src @ R.T + t
        _, idx = tree.query(moved)
        if prev is not None and np.array_equal(idx, prev):
            break
        prev = idx
        R, t = _kabsch(src, dst[idx])
    # re-orthonormalize so R^T R = I to machine precision
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    return R, t


# --------------------------------------------------------------- appearance

@dataclass
class AppearanceConfig:
    iterations: int = 300
    lambda_rgb: float = 0.8
    lambda_pos: float = 1e-2
    lambda_scale: float = 1e-2
    eps_pos: float = 0.5
    eps_scale: float = 1.0
    lr_sh: float = 2.5e-2
    lr_opacity: float = 5e-2
    lr_scale: float = 1e-2
    lr_quat: float = 1e-2
    lr_offset: float = 5e-3
    sh_degree_interval: int = 100  # one more SH band every this many iterations; 0 enables all at once
    background: tuple = (0.0, 0.0, 0.0)
    use_visibility: bool = True
    gate_with_mask: bool = False


def _composite_target(img, mask, bg):
    if mask is None:
        return img
    m = mask[..., None]
    return np.where(m, img, np.asarray(bg, dtype=np.float64))


def init_appearance(template_obs: FrameObservation, mesh: TriangleMesh, texture_dims=(512, 512),
                    cfg: Optional[AppearanceConfig] = None, texture: Optional[GaussianTexture] = None,
                    return_report: bool = False):
    """Optimize a Gaussian texture to match the template frame on a fixed mesh.

    ``texture_dims`` is ``(H, W)`` or a starting :class:`GaussianTexture`.
    """
    cfg = cfg or AppearanceConfig()
    if len(template_obs.cameras) == 0:
        raise EmptyObservation("template observation has no cameras")
    if isinstance(texture_dims, GaussianTexture):
        texture = texture_dims
    if texture is None:
        H, W = texture_dims
        texture = initial_texture(mesh, H, W)
    texture = texture.copy()
    binding = bind_texture(texture, mesh)
    params = texture_params(texture, binding)
    lrs = {"sh": cfg.lr_sh, "opacity_logit": cfg.lr_opacity, "log_scale": cfg.lr_scale, "quat": cfg.lr_quat,
           "offset": cfg.lr_offset}
    sh_lr = np.full((16, 3), cfg.lr_sh / 20.0)
    sh_lr[0] = cfg.lr_sh
    lrs["sh"] = sh_lr
    opt = Adam(params, lrs)
    x = mesh.vertices
    body = template_obs.body
    targets = [_composite_target(im, None if cfg.gate_with_mask else mk, cfg.background)
               for im, mk in zip(template_obs.images, template_obs.masks or [None] * len(template_obs))]
    l1 = np.nan
    for it in range(cfg.iterations):
        ag = attach(texture, binding, x, mesh.faces, params)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        total = 0.0
        for ci, cam in enumerate(template_obs.cameras):
            vis = None
            if cfg.use_visibility and body is not None:
                vis = visibility_mask(ag, [body], cam)
            img = rasterize(ag, cam, cfg.background, visible=vis)
            mask = template_obs.masks[ci] if (cfg.gate_with_mask and template_obs.masks) else None
            val, g_img = rgb_loss(img, targets[ci], mask, cfg.lambda_rgb)
            total += val
            buf = rasterize_backward(img, g_img, need_vertices=False)
            for k in grads:
                grads[k] += buf.texels[k]
        n_cam = len(template_obs.cameras)
        for k in grads:
            grads[k] /= n_cam
        if cfg.sh_degree_interval > 0:
            degree = min(3, it // cfg.sh_degree_interval)
            grads["sh"][:, (degree + 1)**2:] = 0.0
        lp, ls, g_mu, g_ls = gaussian_regularizer_arrays(params["offset"], params["log_scale"], cfg.eps_pos,
                                                         cfg.eps_scale)
        grads["offset"] += cfg.lambda_pos * g_mu
        grads["log_scale"] += cfg.lambda_scale * g_ls
        loss = total / n_cam + cfg.lambda_pos * lp + cfg.lambda_scale * ls
        if not np.isfinite(loss):
            raise DivergedOptimization("appearance loss is not finite", iteration=it)
        params = opt.step(params, grads)
    write_texture_params(texture, binding, params)
    if return_report:
        l1 = appearance_l1(texture, binding, mesh, template_obs, cfg.background, cfg.use_visibility)
        return texture, {"masked_l1": l1}
    return texture


def appearance_l1(texture, binding, mesh, obs: FrameObservation, background=(0, 0, 0), use_visibility=True):
    """Mean absolute error inside the garment masks (all pixels when masks are absent)."""
    ag = attach(texture, binding, mesh)
    errs = []
    for ci, cam in enumerate(obs.cameras):
        vis = visibility_mask(ag, [obs.body], cam) if (use_visibility and obs.body is not None) else None
        img = rasterize(ag, cam, background, visible=vis).rgb
        m = obs.masks[ci] if obs.masks else np.ones(img.shape[:2], bool)
        errs.append(np.abs(img - obs.images[ci])[m])
    e = np.concatenate([a.ravel() for a in errs])
    return float(e.mean()) if e.size else 0.0


# ------------------------------------------------------------------ tracking

class GarmentTracker:
    """Static data shared by all frames: texture binding, rest state, virtual edges."""

    def __init__(self, template_mesh: TriangleMesh, texture: GaussianTexture, cfg: RegistrationConfig,
                 rest: Optional[RestGeometry] = None, ves: Optional[VirtualEdges] = None,
                 binding: Optional[TextureBinding] = None):
        self.template = template_mesh
        self.faces = template_mesh.faces
        self.texture = texture
        self.cfg = cfg
        self.rest = rest if rest is not None else RestGeometry.from_mesh(template_mesh, cfg.material.thickness)
        self.topology: Topology = self.rest.topology
        self.ves = ves if ves is not None else build_virtual_edges(template_mesh, cfg.ve_parallel_tol)
        self.binding = binding if binding is not None else bind_texture(texture, template_mesh)
        self.params = texture_params(texture, self.binding)
        self.face_rest = self.rest.face_rest_states()
        self.bend_w = self.rest.bending_weights() * cfg.material.bending_stiffness

    def physics(self, x, with_grad=True):
        e = strain_energy(x, self.faces, self.face_rest, self.cfg.material, with_grad)
        if len(self.topology.pair_faces) and self.cfg.material.bending_stiffness > 0:
            e = e + bending_energy(x, self.topology, with_grad, weights=self.bend_w, rest_angle=self.rest.rest_angles)
        return e

    def photometric(self, x, obs: FrameObservation, cams: Sequence[int], targets):
        cfg = self.cfg
        ag = attach(self.texture, self.binding, x, self.faces, self.params)
        total = 0.0
        grad = np.zeros_like(x)
        for ci in cams:
            cam = obs.cameras[ci]
            vis = None
            if cfg.use_visibility and obs.body is not None:
                vis = visibility_mask(ag, [obs.body], cam)
            img = rasterize(ag, cam, cfg.background, visible=vis)
            mask = obs.masks[ci] if (cfg.gate_with_mask and obs.masks) else None
            val, g_img = rgb_loss(img, targets[ci], mask, cfg.lambda_rgb)
            total += val
            grad += rasterize_backward(img, g_img, need_texels=False).vertices
        k = max(len(cams), 1)
        return total / k, grad / k

    def register_frame(self, prev_positions, obs: FrameObservation, frame: Optional[int] = None):
        cfg = self.cfg
        x = np.array(positions_of(prev_positions), dtype=np.float64)
        n_it = cfg.iterations_per_frame
        trace = []
        if n_it == 0:
            return x, {}, trace
        if len(obs.cameras) == 0:
            raise EmptyObservation("observation has no cameras")
        boundary = int(np.ceil(cfg.schedule_fraction * n_it)) if cfg.use_schedule else 0
        if boundary < n_it and obs.body is None and cfg.lambda3 > 0:
            raise MissingBody("the body term needs a body mesh in the observation")
        targets = [_composite_target(im, None if cfg.gate_with_mask else mk, cfg.background)
                   for im, mk in zip(obs.images, obs.masks or [None] * len(obs))]
        rng = np.random.default_rng(cfg.seed + (0 if frame is None else 7919 * frame))
        opt = Adam(x.shape, cfg.learning_rate)
        body_col = None
        if obs.body is not None:
            from .energies import MeshCollider
            body_col = MeshCollider(obs.body)
        breakdown = {}
        for it in range(n_it):
            if cfg.camera_subset and cfg.camera_subset < len(obs.cameras):
                cams = np.sort(rng.choice(len(obs.cameras), cfg.camera_subset, replace=False))
            else:
                cams = range(len(obs.cameras))
            l_rgb, g_rgb = self.photometric(x, obs, cams, targets)
            try:
                phys = self.physics(x)
            except DegenerateFace as exc:
                raise DivergedOptimization(f"degenerate face at iteration {it}: {exc}", iteration=it,
                                           frame=frame) from exc
            use_body = it >= boundary
            if use_body:
                term = "body"
                if body_col is not None:
                    cs = compute_collisions(x, body_col, cfg.collision_radius)
                    contact = body_penetration_energy(x, cs, cfg.eps_body)
                else:
                    from .energies import EnergyGrad
                    contact = EnergyGrad(0.0, np.zeros_like(x))
            else:
                term = "ve"
                contact = virtual_edge_energy(x, self.faces, self.ves)
            total = cfg.lambda1 * l_rgb + cfg.lambda2 * phys.value + cfg.lambda3 * contact.value
            if not np.isfinite(total):
                raise DivergedOptimization(f"non-finite loss at iteration {it}", iteration=it, frame=frame)
            grad = cfg.lambda1 * g_rgb + cfg.lambda2 * phys.grad + cfg.lambda3 * contact.grad
            breakdown = {"rgb": l_rgb, "phys": phys.value, "body": contact.value if use_body else 0.0,
                         "ve": 0.0 if use_body else contact.value, "total": total, "term": term}
            trace.append(breakdown)
            frac = it / max(n_it - 1, 1)
            lr = cfg.learning_rate * cfg.lr_final_ratio**frac
            x = opt.step(x, grad, lr)
            if not np.all(np.isfinite(x)):
                raise DivergedOptimization(f"non-finite positions at iteration {it}", iteration=it, frame=frame)
        return x, breakdown, trace


def register_frame(prev_positions, obs: FrameObservation, cfg: RegistrationConfig, rest: RestGeometry,
                   topology: Optional[Topology], ves: Optional[VirtualEdges], texture: GaussianTexture,
                   template_mesh: Optional[TriangleMesh] = None, return_trace: bool = False):
    """One frame of tracking starting at ``prev_positions``; returns the new positions."""
    if template_mesh is None:
        template_mesh = TriangleMesh(positions_of(prev_positions), rest.faces)
    tracker = GarmentTracker(template_mesh, texture, cfg, rest, ves)
    x, breakdown, trace = tracker.register_frame(prev_positions, obs)
    return (x, trace) if return_trace else x


def body_samples(body: TriangleMesh) -> np.ndarray:
    return body.vertices[body.faces].mean(axis=1)


def _follow_body(x, body_prev, body_next):
    """Apply the best rigid fit of the body's frame-to-frame motion to ``x``."""
    if body_prev is None or body_next is None:
        return x
    a, b = positions_of(body_prev), positions_of(body_next)
    if a.shape == b.shape:
        R, t = _kabsch(a, b)
    else:
        R, t = align_first_frame(body_samples(body_prev), body_samples(body_next))
    return x @ R.T + t


def register_sequence(template_mesh: TriangleMesh, texture: GaussianTexture, observations: Sequence[FrameObservation],
                      cfg: Optional[RegistrationConfig] = None, template_body: Optional[TriangleMesh] = None,
                      keep_traces: bool = False) -> RegistrationResult:
    """Track the template through every observation.

    Frame 0 starts from the template moved by ICP between the template body
    and the frame-0 body (skipped without ``template_body``); later frames
    start from the previous result, moved by the body's rigid motion between
    the two frames when ``cfg.body_warm_start`` is set.
    """
    cfg = cfg or RegistrationConfig()
    observations = list(observations)
    if not observations:
        raise EmptyObservation("no frames to register")
    tracker = GarmentTracker(template_mesh, texture, cfg)
    x = template_mesh.vertices.copy()
    if template_body is not None and observations[0].body is not None:
        R, t = align_first_frame(body_samples(template_body), body_samples(observations[0].body))
        x = x @ R.T + t
    result = RegistrationResult([], [])
    for k, obs in enumerate(observations):
        if k and cfg.body_warm_start:
            x = _follow_body(x, observations[k - 1].body, obs.body)
        try:
            x, breakdown, trace = tracker.register_frame(x, obs, frame=k)
        except DivergedOptimization as exc:
            raise DivergedOptimization(f"frame {k}: {exc}", iteration=exc.iteration, frame=k) from exc
        except ValidationError as exc:
            raise type(exc)(f"frame {k}: {exc}") from exc
        result.positions.append(x.copy())
        result.losses.append(breakdown)
        if keep_traces:
            result.traces.append(trace)
        log.info("frame %d: %s", k, {kk: v for kk, v in breakdown.items()})
    return result
