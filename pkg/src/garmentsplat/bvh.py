"""Axis-aligned bounding volume hierarchy over triangles.

Supports first-hit ray casting and closest-point queries. Topology is fixed at
construction; ``refit`` updates the boxes when the vertices move.
"""
from __future__ import annotations

import numpy as np
from numba import njit

_STACK = 128


@njit(cache=True)
def _refit(tris, prims, left, right, start, count, lo, hi):
    for n in range(len(left) - 1, -1, -1):
        if left[n] < 0:
            for d in range(3):
                lo[n, d] = np.inf
                hi[n, d] = -np.inf
            for i in range(start[n], start[n] + count[n]):
                f = prims[i]
                for c in range(3):
                    for d in range(3):
                        v = tris[f, c, d]
                        if v < lo[n, d]:
                            lo[n, d] = v
                        if v > hi[n, d]:
                            hi[n, d] = v
        else:
            a, b = left[n], right[n]
            for d in range(3):
                lo[n, d] = min(lo[a, d], lo[b, d])
                hi[n, d] = max(hi[a, d], hi[b, d])


@njit(cache=True)
def _ray_triangle(o, d, p0, p1, p2):
    e1 = p1 - p0
    e2 = p2 - p0
    px = d[1] * e2[2] - d[2] * e2[1]
    py = d[2] * e2[0] - d[0] * e2[2]
    pz = d[0] * e2[1] - d[1] * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    scale = (abs(e1[0]) + abs(e1[1]) + abs(e1[2])) * (abs(e2[0]) + abs(e2[1]) + abs(e2[2]))
    if abs(det) <= 1e-14 * scale:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    tx = o[0] - p0[0]
    ty = o[1] - p0[1]
    tz = o[2] - p0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    return t, u, v


@njit(cache=True)
def _ray_first_hit(tris, prims, left, right, start, count, lo, hi, origins, dirs, tmin, tmax,
                   exclude, out_face, out_t, out_uv):
    stack = np.empty(_STACK, dtype=np.int64)
    for r in range(len(origins)):
        o = origins[r]
        d = dirs[r]
        best = tmax[r]
        best_f = -1
        bu = 0.0
        bv = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            n = stack[sp]
            t0 = tmin[r]
            t1 = best
            hit = True
            for k in range(3):
                if d[k] != 0.0:
                    inv = 1.0 / d[k]
                    ta = (lo[n, k] - o[k]) * inv
                    tb = (hi[n, k] - o[k]) * inv
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
                    if t0 > t1:
                        hit = False
                        break
                elif o[k] < lo[n, k] or o[k] > hi[n, k]:
                    hit = False
                    break
            if not hit:
                continue
            if left[n] < 0:
                for i in range(start[n], start[n] + count[n]):
                    f = prims[i]
                    if f == exclude[r]:
                        continue
                    t, u, v = _ray_triangle(o, d, tris[f, 0], tris[f, 1], tris[f, 2])
                    if t > tmin[r] and t < best:
                        best = t
                        best_f = f
                        bu = u
                        bv = v
            else:
                stack[sp] = left[n]
                stack[sp + 1] = right[n]
                sp += 2
        out_face[r] = best_f
        out_t[r] = best if best_f >= 0 else np.inf
        out_uv[r, 0] = bu
        out_uv[r, 1] = bv


@njit(cache=True)
def closest_point_triangle(p, a, b, c):
    """Closest point on triangle abc to p; returns (point, barycentrics)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    out = np.empty(3)
    if d1 <= 0.0 and d2 <= 0.0:
        out[0], out[1], out[2] = 1.0, 0.0, 0.0
        return a.copy(), out
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        out[0], out[1], out[2] = 0.0, 1.0, 0.0
        return b.copy(), out
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        out[0], out[1], out[2] = 1.0 - v, v, 0.0
        return a + v * ab, out
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        out[0], out[1], out[2] = 0.0, 0.0, 1.0
        return c.copy(), out
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        out[0], out[1], out[2] = 1.0 - w, 0.0, w
        return a + w * ac, out
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[0], out[1], out[2] = 0.0, 1.0 - w, w
        return b + w * (c - b), out
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    out[0], out[1], out[2] = 1.0 - v - w, v, w
    return a + ab * v + ac * w, out


@njit(cache=True)
def _closest(tris, prims, left, right, start, count, lo, hi, points, max_d2,
             out_face, out_point, out_bary, out_d2):
    stack = np.empty(_STACK, dtype=np.int64)
    for q in range(len(points)):
        p = points[q]
        best = max_d2[q]
        best_f = -1
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            n = stack[sp]
            dist2 = 0.0
            for k in range(3):
                if p[k] < lo[n, k]:
                    dist2 += (lo[n, k] - p[k]) ** 2
                elif p[k] > hi[n, k]:
                    dist2 += (p[k] - hi[n, k]) ** 2
            if dist2 > best:
                continue
            if left[n] < 0:
                for i in range(start[n], start[n] + count[n]):
                    f = prims[i]
                    cpt, bary = closest_point_triangle(p, tris[f, 0], tris[f, 1], tris[f, 2])
                    dd = (cpt[0] - p[0]) ** 2 + (cpt[1] - p[1]) ** 2 + (cpt[2] - p[2]) ** 2
                    if dd < best or (dd == best and best_f >= 0 and f < best_f):
                        best = dd
                        best_f = f
                        out_point[q] = cpt
                        out_bary[q] = bary
            else:
                a, b = left[n], right[n]
                # visit the nearer child first
                da = 0.0
                db = 0.0
                for k in range(3):
                    ca = 0.5 * (lo[a, k] + hi[a, k]) - p[k]
                    cb = 0.5 * (lo[b, k] + hi[b, k]) - p[k]
                    da += ca * ca
                    db += cb * cb
                if da <= db:
                    stack[sp] = b
                    stack[sp + 1] = a
                else:
                    stack[sp] = a
                    stack[sp + 1] = b
                sp += 2
        out_face[q] = best_f
        out_d2[q] = best if best_f >= 0 else np.inf


class BVH:
    """Median-split AABB tree over the faces of a triangle soup."""

    def __init__(self, vertices, faces, leaf_size: int = 4):
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        tris = np.asarray(vertices, dtype=np.float64)[self.faces]
        cent = tris.mean(axis=1)
        left, right, start, count = [], [], [], []
        prims = np.arange(len(self.faces), dtype=np.int64)
        work = [(0, len(prims), -1, 0)]  # (lo, hi, parent, side)
        while work:
            a, b, parent, side = work.pop()
            node = len(left)
            left.append(-1)
            right.append(-1)
            start.append(a)
            count.append(b - a)
            if parent >= 0:
                (left if side == 0 else right)[parent] = node
            if b - a <= leaf_size:
                continue
            sub = prims[a:b]
            c = cent[sub]
            axis = int(np.argmax(c.max(0) - c.min(0)))
            mid = (b - a) // 2
            order = np.argsort(c[:, axis], kind="stable")
            prims[a:b] = sub[order]
            count[node] = 0
            # push right first so the left subtree is numbered next (preorder)
            work.append((a + mid, b, node, 1))
            work.append((a, a + mid, node, 0))
        self.prims = prims
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)
        self.lo = np.empty((len(left), 3))
        self.hi = np.empty((len(left), 3))
        self.refit(vertices)

    def refit(self, vertices) -> None:
        self.tris = np.ascontiguousarray(np.asarray(vertices, dtype=np.float64)[self.faces])
        _refit(self.tris, self.prims, self.left, self.right, self.start, self.count, self.lo, self.hi)

    def _args(self):
        return (self.tris, self.prims, self.left, self.right, self.start, self.count, self.lo, self.hi)

    def ray_first_hit(self, origins, dirs, tmin=0.0, tmax=np.inf, exclude=None):
        """First hit along each ray with ``tmin < t < tmax``.

        Returns ``(face, t, uv)``; ``face`` is -1 where nothing is hit. ``uv`` are
        the barycentric weights of corners 1 and 2.
        """
        origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
        n = len(origins)
        tmin = np.broadcast_to(np.asarray(tmin, dtype=np.float64), (n,)).copy()
        tmax = np.broadcast_to(np.asarray(tmax, dtype=np.float64), (n,)).copy()
        if exclude is None:
            exclude = np.full(n, -1, dtype=np.int64)
        else:
            exclude = np.broadcast_to(np.asarray(exclude, dtype=np.int64), (n,)).copy()
        face = np.empty(n, dtype=np.int64)
        t = np.empty(n)
        uv = np.empty((n, 2))
        if len(self.faces):
            _ray_first_hit(*self._args(), origins, dirs, tmin, tmax, exclude, face, t, uv)
        else:
            face[:] = -1
            t[:] = np.inf
        return face, t, uv

    def closest_points(self, points, max_dist=np.inf):
        """Closest surface point for each query within ``max_dist``.

        Returns ``(face, point, bary, dist)``; ``face`` is -1 for misses.
        """
        points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        n = len(points)
        max_d2 = np.broadcast_to(np.asarray(max_dist, dtype=np.float64) ** 2, (n,)).copy()
        face = np.empty(n, dtype=np.int64)
        pt = np.zeros((n, 3))
        bary = np.zeros((n, 3))
        d2 = np.empty(n)
        if len(self.faces):
            _closest(*self._args(), points, max_d2, face, pt, bary, d2)
        else:
            face[:] = -1
            d2[:] = np.inf
        return face, pt, bary, np.sqrt(d2)
