"""Geometry and image metrics. Distances are reported in centimetres."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .bvh import BVH
from .errors import EmptyGeometry, ShapeMismatch
from .losses import psnr, ssim
from .mesh import TriangleMesh, triangle_areas

DEFAULT_SAMPLES = 10_000


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise EmptyGeometry("point cloud has non-finite coordinates")


@dataclass
class MetricReport:
    chamfer: float
    p2m: float
    fscore_pct: float
    threshold_cm: float
    psnr: Optional[float] = None
    ssim: Optional[float] = None


def sample_surface(mesh: TriangleMesh, n: int = DEFAULT_SAMPLES, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    rng = np.random.default_rng(seed)
    area = triangle_areas(mesh.vertices, mesh.faces)
    total = area.sum()
    if total <= 0:
        raise EmptyGeometry("mesh has zero area")
    face = rng.choice(len(area), size=n, p=area / total)
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    return np.einsum("nk,nkd->nd", bary, mesh.vertices[mesh.faces[face]])


def _points(g, n, seed):
    if isinstance(g, TriangleMesh):
        if g.n_faces == 0:
            raise EmptyGeometry("mesh has no faces")
        return sample_surface(g, n, seed)
    pts = g.points if isinstance(g, PointCloud) else np.asarray(g, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyGeometry("empty point set")
    return pts


def point_to_mesh(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Unsigned distance (m) of each point to the mesh surface."""
    _, _, _, d = BVH(mesh.vertices, mesh.faces).closest_points(points)
    return d


def chamfer_p2m_fscore(pred, gt, threshold: float = 1.0, n_samples: int = DEFAULT_SAMPLES, seed: int = 0):
    """``(CD, p2m, F-score)``; CD and p2m in cm, F-score in percent.

    CD is the mean of the two directional mean nearest-neighbour distances;
    p2m is the mean distance of predicted samples to the ground-truth surface
    (nearest ground-truth point for clouds). ``threshold`` is in cm.
    """
    p = _points(pred, n_samples, seed)
    g = _points(gt, n_samples, seed + 1)
    d_pg, _ = cKDTree(g).query(p)
    d_gp, _ = cKDTree(p).query(g)
    cd = 0.5 * (d_pg.mean() + d_gp.mean()) * 100.0
    if isinstance(gt, TriangleMesh):
        p2m = point_to_mesh(p, gt).mean() * 100.0
    else:
        p2m = d_pg.mean() * 100.0
    thr = threshold / 100.0
    precision = np.mean(d_pg < thr)
    recall = np.mean(d_gp < thr)
    f = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall) * 100.0
    return float(cd), float(p2m), float(f)


def psnr_ssim(a, b):
    a = np.asarray(getattr(a, "rgb", a), dtype=np.float64)
    b = np.asarray(getattr(b, "rgb", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return psnr(a, b), ssim(a, b)


def evaluate(pred, gt, threshold: float = 1.0, n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
             pred_image=None, gt_image=None) -> MetricReport:
    cd, p2m, f = chamfer_p2m_fscore(pred, gt, threshold, n_samples, seed)
    rep = MetricReport(cd, p2m, f, threshold)
    if pred_image is not None and gt_image is not None:
        rep.psnr, rep.ssim = psnr_ssim(pred_image, gt_image)
    return rep
