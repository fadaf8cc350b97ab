import numpy as np
import pytest

from garmentsplat.errors import ShapeMismatch
from garmentsplat.render import (CULLED, Camera, evaluate_sh, project_gaussian, rasterize, rasterize_backward,
                                 visibility_mask)
from garmentsplat.scenes import grid_patch
from garmentsplat.texture import WorldGaussians, attach, bind_texture, initial_texture, quat_to_rotmat

from suites import rasterizer_gradient_suite

Y00 = 0.28209479177387814


def _front_camera(w=32, h=32, fx=40.0):
    # looks down +z from the origin
    return Camera(fx, fx, (w - 1) / 2, (h - 1) / 2, np.eye(3), np.zeros(3), w, h)


def _world(means, scales, opac, dc):
    n = len(means)
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = dc
    return WorldGaussians(np.asarray(means, float), np.tile(np.eye(3), (n, 1, 1)),
                          np.broadcast_to(np.asarray(scales, float).reshape(-1, 1), (n, 3)).copy(),
                          np.asarray(opac, float), sh)


def _reference_render(world, cam, bg, dilation=0.3):
    """Per-pixel brute force: global depth sort, no tiles."""
    pc = world.means @ cam.R.T + cam.t
    order = np.argsort(pc[:, 2], kind="stable")
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    rgb = np.zeros((cam.height, cam.width, 3))
    T = np.ones((cam.height, cam.width))
    for g in order:
        X, Y, Z = pc[g]
        if Z <= cam.near:
            continue
        u, v = cam.fx * X / Z + cam.cx, cam.fy * Y / Z + cam.cy
        J = np.array([[cam.fx / Z, 0, -cam.fx * X / Z**2], [0, cam.fy / Z, -cam.fy * Y / Z**2]])
        RS = world.rotmats[g] * world.scales[g]
        cov = J @ cam.R @ RS @ RS.T @ cam.R.T @ J.T + dilation * np.eye(2)
        Q = np.linalg.inv(cov)
        d = np.stack([xs - u, ys - v], -1)
        a = np.minimum(0.99, world.opacities[g] * np.exp(-0.5 * np.einsum("...i,ij,...j->...", d, Q, d)))
        a = np.where(a < 1 / 255, 0.0, a)
        col = np.clip(Y00 * world.sh[g, 0] + 0.5, 0, 1)
        rgb += (a * T)[..., None] * col
        T *= 1 - a
    return rgb + T[..., None] * bg, 1 - T


# ------------------------------------------------------------------ SH

def test_sh_zero_is_grey():
    rgb = evaluate_sh(np.zeros((16, 3)), np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(rgb, [0.5, 0.5, 0.5])


def test_sh_dc_only_is_constant():
    c = np.zeros((16, 3))
    c[0] = [0.4, -0.9, 3.0]
    expected = np.clip(Y00 * c[0] + 0.5, 0, 1)
    rng = np.random.default_rng(0)
    for d in rng.standard_normal((20, 3)):
        np.testing.assert_allclose(evaluate_sh(c, d / np.linalg.norm(d)), expected, atol=1e-12)


def test_sh_degree_one_flips_with_direction():
    rng = np.random.default_rng(1)
    c = np.zeros((16, 3))
    c[1:4] = 0.1 * rng.standard_normal((3, 3))
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    a = evaluate_sh(c, d) - 0.5
    b = evaluate_sh(c, -d) - 0.5
    np.testing.assert_allclose(a, -b, atol=1e-12)
    assert np.abs(a).max() > 1e-3


# ---------------------------------------------------------------- projection

def test_projection_on_axis():
    cam = Camera(100.0, 100.0, 31.5, 31.5, np.eye(3), np.zeros(3), 64, 64)
    z, s = 2.0, 0.05
    mean, cov, depth = project_gaussian({"position": [0, 0, z], "rotmat": np.eye(3), "scale": [s, s, s]}, cam,
                                        dilation=0.0)
    np.testing.assert_allclose(mean, [31.5, 31.5])
    np.testing.assert_allclose(cov, (100 * s / z) ** 2 * np.eye(2), rtol=1e-12)
    assert depth == pytest.approx(z)


def test_projection_behind_camera_is_culled():
    cam = _front_camera()
    g = {"position": [0, 0, -1.0], "rotmat": np.eye(3), "scale": [0.05] * 3}
    assert project_gaussian(g, cam) is CULLED


def test_projection_translation_invariance():
    rng = np.random.default_rng(2)
    cam = Camera.look_at([0.3, 0.2, -1.5], [0, 0, 0], fx=60, width=48, height=48)
    off = np.array([0.7, -1.2, 3.0])
    moved = Camera.look_at(np.array([0.3, 0.2, -1.5]) + off, off, fx=60, width=48, height=48)
    g = {"position": rng.uniform(-0.1, 0.1, 3), "rotmat": quat_to_rotmat(rng.standard_normal(4)),
         "scale": [0.02, 0.05, 0.01]}
    h = dict(g, position=g["position"] + off)
    a, b = project_gaussian(g, cam), project_gaussian(h, moved)
    np.testing.assert_allclose(a[0], b[0], atol=1e-9)
    np.testing.assert_allclose(a[1], b[1], atol=1e-9)
    assert a[2] == pytest.approx(b[2])


# ---------------------------------------------------------------- rasterize

def test_zero_gaussians_is_background():
    bg = np.array([0.1, 0.2, 0.3])
    img = rasterize(_world(np.zeros((0, 3)), [], [], np.zeros((0, 3))), _front_camera(), bg)
    np.testing.assert_array_equal(img.rgb, np.broadcast_to(bg, img.rgb.shape))
    np.testing.assert_array_equal(img.alpha, 0.0)


def test_opaque_centered_gaussian_clamps_to_099():
    cam = _front_camera(31, 31)
    dc = np.array([[0.5, -1.0, 1.2]])
    img = rasterize(_world([[0, 0, 1.0]], [0.05], [1.0], dc), cam, np.zeros(3))
    assert img.alpha[15, 15] == pytest.approx(0.99)
    col = np.clip(Y00 * dc[0] + 0.5, 0, 1)
    np.testing.assert_allclose(img.rgb[15, 15], 0.99 * col, atol=1e-12)


def test_near_occludes_far():
    cam = _front_camera(31, 31)
    w = _world([[0, 0, 1.0], [0, 0, 2.0]], [0.05, 0.1], [1.0, 1.0], np.array([[-2.0] * 3, [2.0] * 3]))
    img = rasterize(w, cam, np.zeros(3))
    # near is black, far white; far's share of the center pixel is at most 1%
    assert img.rgb[15, 15].max() <= 0.01 + 1e-12
    assert img.rgb[15, 15].max() > 0


def test_matches_brute_force_and_conserves():
    rng = np.random.default_rng(3)
    for _ in range(5):
        n = 12
        w = WorldGaussians(rng.uniform(-0.3, 0.3, (n, 3)) + [0, 0, 1.5], quat_to_rotmat(rng.standard_normal((n, 4))),
                           rng.uniform(0.02, 0.1, (n, 3)), rng.uniform(0.2, 1.0, n), np.zeros((n, 16, 3)))
        w.sh[:, 0] = rng.uniform(-1.5, 1.5, (n, 3))
        cam = _front_camera(40, 36)
        bg = rng.uniform(0, 1, 3)
        img = rasterize(w, cam, bg)
        ref_rgb, ref_alpha = _reference_render(w, cam, bg)
        np.testing.assert_allclose(img.rgb, ref_rgb, atol=1e-9)
        np.testing.assert_allclose(img.alpha, ref_alpha, atol=1e-9)
        assert np.all(np.isfinite(img.rgb)) and img.alpha.min() >= 0 and img.alpha.max() <= 1
        # conservation: rgb minus background share equals the premultiplied contributions
        contrib, _ = _reference_render(w, cam, np.zeros(3))
        np.testing.assert_allclose(img.rgb - (1 - img.alpha)[..., None] * bg, contrib, atol=1e-6)


def test_render_is_deterministic():
    rng = np.random.default_rng(4)
    w = WorldGaussians(rng.uniform(-0.3, 0.3, (30, 3)) + [0, 0, 1.5], quat_to_rotmat(rng.standard_normal((30, 4))),
                       rng.uniform(0.02, 0.1, (30, 3)), rng.uniform(0.2, 1.0, 30), rng.standard_normal((30, 16, 3)))
    a = rasterize(w, _front_camera(), np.zeros(3))
    b = rasterize(w, _front_camera(), np.zeros(3))
    np.testing.assert_array_equal(a.rgb, b.rgb)


# ----------------------------------------------------------------- backward

def _scene():
    rng = np.random.default_rng(5)
    n = 6
    return WorldGaussians(rng.uniform(-0.2, 0.2, (n, 3)) + [0, 0, 1.5], quat_to_rotmat(rng.standard_normal((n, 4))),
                          rng.uniform(0.03, 0.1, (n, 3)), rng.uniform(0.3, 0.9, n), rng.standard_normal((n, 16, 3)))


def test_backward_shape_mismatch():
    img = rasterize(_scene(), _front_camera(), np.zeros(3))
    with pytest.raises(ShapeMismatch):
        rasterize_backward(img, np.zeros((16, 16, 3)))
    with pytest.raises(ShapeMismatch):
        rasterize_backward(img, np.zeros((32, 32, 3)), np.zeros((31, 32)))


def test_backward_zero_upstream():
    img = rasterize(_scene(), _front_camera(), np.zeros(3))
    g = rasterize_backward(img, np.zeros((32, 32, 3)), np.zeros((32, 32)))
    for a in (g.position, g.rotation, g.scale, g.opacity, g.sh):
        assert np.all(a == 0)


def test_backward_culled_gaussian_has_zero_grad():
    w = _scene()
    w.means[2] = [0, 0, -1.0]  # behind the camera
    img = rasterize(w, _front_camera(), np.zeros(3))
    g = rasterize_backward(img, np.ones((32, 32, 3)), np.ones((32, 32)))
    assert np.all(g.position[2] == 0) and np.all(g.sh[2] == 0) and g.opacity[2] == 0
    assert np.abs(g.position).sum() > 0


def test_backward_matches_finite_differences():
    res = rasterizer_gradient_suite(50)
    assert max(res["world"], res["sh"], res["vertices"]) < 1e-3, res


# --------------------------------------------------------------- visibility

def _two_plane_scene():
    """Front sheet at z=1 facing the camera, a smaller back sheet 1 cm behind."""
    R = np.array([[1.0, 0, 0], [0, 0, 1.0], [0, -1.0, 0]])  # xz-plane (+y normal) -> xy-plane facing -z
    front = grid_patch(5, 0.4)
    front = front.with_positions(front.vertices @ R.T + [0, 0, 1.0])
    back = grid_patch(5, 0.3)
    back = back.with_positions(back.vertices @ R.T + [0, 0, 1.01])
    out = []
    for m in (front, back):
        tex = initial_texture(m, 8, opacity=0.95)
        tex.data[..., 0][tex.valid_mask] = 1.0 if m is front else -1.0
        out.append(attach(tex, bind_texture(tex, m), m))
    return front, back, out


def _segment_blocked(c, p, tris, delta):
    """Moller-Trumbore over every triangle (brute force)."""
    d = p - c
    dist = np.linalg.norm(d)
    d = d / dist
    for a, b, cc in tris:
        e1, e2 = b - a, cc - a
        h = np.cross(d, e2)
        det = e1 @ h
        if abs(det) < 1e-14:
            continue
        s = c - a
        u = s @ h / det
        q = np.cross(s, e1)
        v = d @ q / det
        t = e2 @ q / det
        if u >= 0 and v >= 0 and u + v <= 1 and 0 < t < dist - delta:
            return True
    return False


def test_visibility_no_occluders():
    _, _, (fg, bg) = _two_plane_scene()
    assert visibility_mask(fg, [], _front_camera()).all()


def test_visibility_plane_between():
    front, _, (_, bgs) = _two_plane_scene()
    cam = _front_camera()
    vis = visibility_mask(bgs, [front], cam)
    assert not vis.any()


def test_visibility_two_sided_sheet_brute_force():
    front, back, (fg, bgs) = _two_plane_scene()
    cam = Camera.look_at([0.05, 0.03, 0.0], [0, 0, 1.0], fx=40, width=32, height=32)
    vis_f = visibility_mask(fg, [front, back], cam, self_index=0)
    vis_b = visibility_mask(bgs, [front, back], cam, self_index=1)
    assert vis_f.all() and not vis_b.any()
    c = cam.center
    tf = front.vertices[front.faces]
    for i in range(0, len(bgs), 3):
        assert _segment_blocked(c, bgs.origin[i], tf, 1e-3) == (not vis_b[i])


def test_visibility_culled_render_equals_front_only():
    front, back, (fg, bgs) = _two_plane_scene()
    cam = _front_camera(48, 48, 50.0)
    both = WorldGaussians.concatenate([fg.world, bgs.world])
    mask = np.concatenate([visibility_mask(fg, [front, back], cam, self_index=0),
                           visibility_mask(bgs, [front, back], cam, self_index=1)])
    a = rasterize(both, cam, np.zeros(3), visible=mask).rgb
    b = rasterize(fg.world, cam, np.zeros(3)).rgb
    assert np.abs(a - b).max() < 1e-6


def test_all_true_mask_is_identity():
    w = _scene()
    a = rasterize(w, _front_camera(), np.zeros(3))
    b = rasterize(w, _front_camera(), np.zeros(3), visible=np.ones(len(w), bool))
    np.testing.assert_array_equal(a.rgb, b.rgb)
