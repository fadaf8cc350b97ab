"""Deterministic synthetic scenes with known ground truth.

All scenes are y-up, in metres. Ground-truth motion comes from the simulator,
images from the rasterizer with a fixed textured appearance, seen by a ring of
eight 64x64 cameras.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .energies import MaterialParams
from .errors import UnknownScene
from .mesh import TriangleMesh
from .registration import FrameObservation
from .render import Camera, rasterize, visibility_mask
from .simulator import (BodyMotion, Garment, MaterialField, Pins, RestGeometry, SimConfig, SimState, simulate,
                        step)
from .texture import (GaussianTexture, attach, bind_texture, initial_texture, SH_SLICE)

SCENE_KINDS = ("patch_drop", "patch_hang", "skirt_on_capsule", "skirt_fast", "two_cylinders")
SH_C0 = 0.28209479177387814


# ------------------------------------------------------------------ geometry

def grid_patch(n: int = 9, size: float = 0.3, height: float = 0.0) -> TriangleMesh:
    """Square ``n x n`` vertex patch in the xz-plane with +y normals and unit-square UVs."""
    s = np.linspace(0.0, 1.0, n)
    u, v = np.meshgrid(s, s)
    verts = np.stack([(u.ravel() - 0.5) * size, np.full(n * n, height), (v.ravel() - 0.5) * size], axis=1)
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            faces += [[a, a + n, a + n + 1], [a, a + n + 1, a + 1]]
    faces = np.asarray(faces)
    uv = np.stack([u.ravel(), v.ravel()], axis=1)
    return TriangleMesh(verts, faces, uv[faces] * 0.98 + 0.01)


def tube(radius_top: float, radius_bottom: float, y_top: float, y_bottom: float, n_seg: int = 16,
         n_rings: int = 6, inward: bool = False) -> TriangleMesh:
    """Open truncated cone around the y axis with outward normals and a seamed UV chart.

    Ring 0 is at ``y_top``. UV u runs around the axis (the seam column uses
    ``u = 1``), v runs top to bottom.
    """
    t = np.linspace(0.0, 1.0, n_rings)
    ang = 2.0 * np.pi * np.arange(n_seg) / n_seg
    r = radius_top + (radius_bottom - radius_top) * t
    y = y_top + (y_bottom - y_top) * t
    verts = np.stack([np.outer(r, np.cos(ang)).ravel(), np.repeat(y, n_seg),
                      -np.outer(r, np.sin(ang)).ravel()], axis=1)
    faces, uvs = [], []
    for i in range(n_rings - 1):
        for j in range(n_seg):
            j1 = (j + 1) % n_seg
            a, b, c, d = i * n_seg + j, i * n_seg + j1, (i + 1) * n_seg + j, (i + 1) * n_seg + j1
            ua, ub = j / n_seg, (j + 1) / n_seg
            va, vc = t[i], t[i + 1]
            tri1, uv1 = [a, c, d], [(ua, va), (ua, vc), (ub, vc)]
            tri2, uv2 = [a, d, b], [(ua, va), (ub, vc), (ub, va)]
            if inward:
                tri1, uv1 = tri1[::-1], uv1[::-1]
                tri2, uv2 = tri2[::-1], uv2[::-1]
            faces += [tri1, tri2]
            uvs += [uv1, uv2]
    uvs = np.asarray(uvs) * 0.98 + 0.01
    return TriangleMesh(verts, np.asarray(faces), uvs)


def capsule(radius: float = 0.12, half_length: float = 0.25, n_seg: int = 24, n_cap: int = 6) -> TriangleMesh:
    """Closed capsule along y with outward normals (a sphere when ``half_length`` is 0)."""
    rings = []
    for k in range(1, n_cap + 1):  # top cap, pole excluded
        phi = 0.5 * np.pi * (1 - k / n_cap)
        rings.append((radius * np.cos(phi), half_length + radius * np.sin(phi)))
    if half_length > 0:
        rings.append((radius, -half_length))
    for k in range(1, n_cap):
        phi = 0.5 * np.pi * k / n_cap
        rings.append((radius * np.cos(phi), -half_length - radius * np.sin(phi)))
    ang = 2.0 * np.pi * np.arange(n_seg) / n_seg
    verts = [[0.0, half_length + radius, 0.0]]
    for r, y in rings:
        verts += [[r * np.cos(a), y, -r * np.sin(a)] for a in ang]
    verts.append([0.0, -half_length - radius, 0.0])
    verts = np.asarray(verts)
    nr = len(rings)
    faces = []
    for j in range(n_seg):
        faces.append([0, 1 + j, 1 + (j + 1) % n_seg])
    for i in range(nr - 1):
        for j in range(n_seg):
            j1 = (j + 1) % n_seg
            a, b = 1 + i * n_seg + j, 1 + i * n_seg + j1
            c, d = a + n_seg, b + n_seg
            faces += [[a, c, d], [a, d, b]]
    last = len(verts) - 1
    base = 1 + (nr - 1) * n_seg
    for j in range(n_seg):
        faces.append([base + j, last, base + (j + 1) % n_seg])
    return TriangleMesh(verts, np.asarray(faces))


def ring_cameras(n: int = 8, distance: float = 1.2, heights=(0.25, -0.1), target=(0.0, 0.0, 0.0),
                 size: int = 64, fx: float = 128.0) -> list:
    cams = []
    for k in range(n):
        a = 2.0 * np.pi * k / n
        eye = np.array([distance * np.sin(a), heights[k % len(heights)], distance * np.cos(a)])
        cams.append(Camera.look_at(eye, target, (0.0, 1.0, 0.0), fx=fx, width=size, height=size))
    return cams


def rotation_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def textured_ground_truth(mesh: TriangleMesh, size: int, seed: int) -> GaussianTexture:
    """Colorful smooth pattern in UV space, stored as DC spherical harmonics."""
    rng = np.random.default_rng(seed)
    tex = initial_texture(mesh, size, size, opacity=0.95, size_factor=1.0)
    rows, cols = np.mgrid[0:size, 0:size]
    u, v = (cols + 0.5) / size, (rows + 0.5) / size
    color = np.zeros((size, size, 3))
    for c in range(3):
        for _ in range(3):
            fu, fv = rng.integers(1, 5, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            color[..., c] += np.sin(2 * np.pi * (fu * u + fv * v) + ph)
    color = 0.5 + 0.4 * np.tanh(color / 1.5)
    sh = np.zeros((size, size, 48), dtype=np.float32)
    sh[..., 0:3] = (color - 0.5) / SH_C0
    tex.data[..., SH_SLICE] = np.where(tex.valid_mask[..., None], sh, 0.0)
    return tex


# ------------------------------------------------------------------- scenes

@dataclass
class SyntheticScene:
    kind: str
    seed: int
    garment: TriangleMesh
    rest: RestGeometry
    material: MaterialField
    cameras: list
    gt_positions: np.ndarray
    body_motion: Optional[BodyMotion]
    texture: Optional[GaussianTexture]
    images: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    sim_config: Optional[SimConfig] = None
    extra: dict = field(default_factory=dict)
    background: tuple = (0.0, 0.0, 0.0)

    @property
    def n_frames(self) -> int:
        return len(self.gt_positions)

    @property
    def meshes(self) -> dict:
        out = {"garment": self.garment}
        if self.body_motion is not None:
            out["body"] = self.body_motion[0]
        return out

    def gt_mesh(self, t: int) -> TriangleMesh:
        return self.garment.with_positions(self.gt_positions[t])

    def observations(self) -> list:
        return [FrameObservation(self.images[t], self.cameras, self.masks[t],
                                 self.body_motion[t] if self.body_motion is not None else None)
                for t in range(len(self.images))]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.round(self.gt_positions, 6).tobytes())
        for frame in self.images:
            for im in frame:
                h.update(np.round(im, 4).tobytes())
        return h.hexdigest()


def render_views(mesh: TriangleMesh, texture: GaussianTexture, cameras, body: Optional[TriangleMesh] = None,
                 background=(0.0, 0.0, 0.0), binding=None):
    binding = binding or bind_texture(texture, mesh)
    ag = attach(texture, binding, mesh)
    images, masks = [], []
    for cam in cameras:
        vis = visibility_mask(ag, [body], cam) if body is not None else None
        img = rasterize(ag, cam, background, visible=vis)
        images.append(img.rgb)
        masks.append(img.alpha > 0.5)
    return images, masks


def _render_sequence(garment, texture, positions, cameras, motion, background):
    binding = bind_texture(texture, garment)
    images, masks = [], []
    for t, x in enumerate(positions):
        body = motion[t] if motion is not None else None
        ims, mks = render_views(garment.with_positions(x), texture, cameras, body, background, binding)
        images.append(ims)
        masks.append(mks)
    return images, masks


def _patch_drop(seed, n_frames=20, material=None, render=True, noise=0.0, n=9, texture_size=32, cfg=None):
    rng = np.random.default_rng(seed)
    garment = grid_patch(n, 0.3, 0.15)
    rest = RestGeometry.from_mesh(garment)
    mat = material if material is not None else MaterialField.uniform(garment.n_vertices)
    body = capsule(0.1, 0.0, 16, 6)
    body = body.with_positions(body.vertices + [0.02 * rng.standard_normal(), 0.0, 0.0])
    motion = BodyMotion([body] * n_frames)
    cfg = cfg or SimConfig()
    gt = simulate(SimState.at_rest(garment.vertices), mat, rest, motion, n_frames - 1, cfg)
    if noise > 0:
        gt = gt.copy()
        gt[1:] += noise * rng.standard_normal(gt[1:].shape)
    cams = ring_cameras(heights=(0.35, 0.1))
    tex = textured_ground_truth(garment, texture_size, seed)
    images, masks = _render_sequence(garment, tex, gt, cams, motion, (0, 0, 0)) if render else ([], [])
    return SyntheticScene("patch_drop", seed, garment, rest, mat, cams, gt, motion, tex, images, masks, cfg)


def _patch_hang(seed, n_frames=20, material=None, render=True, noise=0.0, n=9, texture_size=32, cfg=None):
    """Patch held along one edge, released flat and swinging down (no contact)."""
    rng = np.random.default_rng(seed)
    garment = grid_patch(n, 0.3, 0.15)
    rest = RestGeometry.from_mesh(garment)
    mat = material if material is not None else MaterialField.uniform(garment.n_vertices)
    pins = np.arange(n)  # the z = -0.15 edge
    cfg = cfg or SimConfig()
    targets = [garment.vertices[pins]] * n_frames
    gt = simulate(SimState.at_rest(garment.vertices), mat, rest, None, n_frames - 1, cfg, pin_indices=pins,
                  pin_targets=targets)
    if noise > 0:
        gt = gt.copy()
        gt[1:] += noise * rng.standard_normal(gt[1:].shape)
    cams = ring_cameras(heights=(0.35, 0.1))
    tex = textured_ground_truth(garment, texture_size, seed)
    images, masks = _render_sequence(garment, tex, gt, cams, None, (0, 0, 0)) if render else ([], [])
    return SyntheticScene("patch_hang", seed, garment, rest, mat, cams, gt, None, tex, images, masks, cfg,
                          {"pins": pins})


def _capsule_transform(t, n_frames, fast, seed):
    if fast:
        # alternate between two poses farther apart than the body radius
        dx = 0.075 if t % 2 else -0.075
        return rotation_y(0.0), np.array([dx if t else 0.0, 0.0, 0.0])
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 0.5)
    s = np.sin(2 * np.pi * (t / max(n_frames, 1)) + phase) - np.sin(phase)
    return rotation_y(0.35 * s), np.array([0.04 * s, 0.0, 0.02 * s])


def _skirt(seed, n_frames=30, fast=False, render=True, texture_size=32, n_seg=16, n_rings=6, settle_frames=30):
    garment = tube(0.125, 0.2, 0.2, -0.2, n_seg, n_rings)
    rest = RestGeometry.from_mesh(garment)
    mat = MaterialField.uniform(garment.n_vertices, (50.0, 1.0, 1.0, 1.0))
    body0 = capsule(0.12, 0.25, 24, 6)
    cfg = SimConfig(damping=0.05)
    pins = np.arange(n_seg)  # waist ring
    # settle under gravity on the static body
    settle = replace(cfg, damping=0.2)
    state = SimState.at_rest(garment.vertices)
    waist = Pins(pins, garment.vertices[pins])
    for _ in range(settle_frames):
        state = step(state, mat, rest, body0, cfg=settle, pins=waist)
    x0 = state.x
    bodies, pin_targets = [], []
    for t in range(n_frames):
        R, tr = _capsule_transform(t, n_frames, fast, seed)
        bodies.append(body0.with_positions(body0.vertices @ R.T + tr))
        pin_targets.append(garment.vertices[pins] @ R.T + tr)
    motion = BodyMotion(bodies)
    gt = simulate(SimState.at_rest(x0), mat, rest, motion, n_frames - 1, cfg, pin_indices=pins,
                  pin_targets=pin_targets)
    cams = ring_cameras()
    tex = textured_ground_truth(garment, texture_size, seed)
    images, masks = _render_sequence(garment, tex, gt, cams, motion, (0, 0, 0)) if render else ([], [])
    kind = "skirt_fast" if fast else "skirt_on_capsule"
    return SyntheticScene(kind, seed, garment, rest, mat, cams, gt, motion, tex, images, masks, cfg,
                          {"pins": pins, "template_body": body0})


def _two_cylinders(seed, render=True, texture_size=32, n_seg=20, n_rings=5):
    body = capsule(0.10, 0.25, 24, 6)
    # requested order: inner first. Their initial radii are swapped.
    inner = tube(0.16, 0.16, 0.2, -0.2, n_seg, n_rings)
    outer = tube(0.13, 0.13, 0.2, -0.2, n_seg, n_rings)
    garments = [Garment(inner, RestGeometry.from_mesh(inner)), Garment(outer, RestGeometry.from_mesh(outer))]
    cams = ring_cameras()
    tex = textured_ground_truth(outer, texture_size, seed)
    images, masks = ([], [])
    if render:
        ims, mks = render_views(outer, tex, cams, body)
        images, masks = [ims], [mks]
    gt = outer.vertices[None].copy()
    return SyntheticScene("two_cylinders", seed, outer, garments[1].rest, garments[1].material, cams, gt,
                          BodyMotion([body]), tex, images, masks, SimConfig(),
                          {"garments": garments, "body": body})


def make_synthetic_scene(kind: str, seed: int = 0, **options) -> SyntheticScene:
    """Build one of ``patch_drop``, ``patch_hang``, ``skirt_on_capsule``, ``skirt_fast`` or ``two_cylinders``."""
    if kind == "patch_drop":
        return _patch_drop(seed, **options)
    if kind == "patch_hang":
        return _patch_hang(seed, **options)
    if kind == "skirt_on_capsule":
        return _skirt(seed, **options)
    if kind == "skirt_fast":
        options.setdefault("n_frames", 6)
        return _skirt(seed, fast=True, **options)
    if kind == "two_cylinders":
        return _two_cylinders(seed, **options)
    raise UnknownScene(f"unknown scene kind {kind!r}; expected one of {SCENE_KINDS}")
