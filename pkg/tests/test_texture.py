import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from garmentsplat.errors import ShapeMismatch, UvCoverageError
from garmentsplat.mesh import LocalFrame, SurfacePoint, TriangleMesh, local_frame
from garmentsplat.scenes import grid_patch
from garmentsplat.texture import (N_CHANNELS, GaussianTexel, GaussianTexture, attach, attached_backward,
                                  bind_texture, coverage_mask, initial_texture, local_to_world, logit,
                                  quat_to_rotmat, sigmoid, spawn_gaussians, texel_uv_centers, texture_params,
                                  write_texture_params)

from conftest import central_fd, random_rigid, rel_err

# unit square in UV and in the z=0 plane, two faces
SQUARE = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]), [[0, 1, 2], [0, 2, 3]],
                      uvs=np.array([[[0, 0], [1, 0], [1, 1]], [[0, 0], [1, 1], [0, 1]]], dtype=float))


def _texel(offset=(0, 0, 0), log_scale=(-3, -2, -1), quat=(1, 0, 0, 0)):
    return GaussianTexel(np.zeros((16, 3)), 0.5, np.array(log_scale, float), np.array(quat, float),
                         np.array(offset, float))


def test_channel_count_and_roundtrip(rng):
    ch = rng.normal(size=N_CHANNELS)
    assert N_CHANNELS == 48 + 1 + 3 + 4 + 3
    assert np.array_equal(GaussianTexel.from_channels(ch).to_channels(), ch)


def test_invalid_texels_are_zeroed():
    data = np.ones((2, 2, N_CHANNELS))
    tex = GaussianTexture(data, [[True, False], [False, True]])
    assert not tex.data[0, 1].any() and tex.data[0, 0].all()
    with pytest.raises(ShapeMismatch):
        GaussianTexture(np.zeros((2, 2, 58)), np.ones((2, 2), bool))


def test_single_valid_texel_spawns_one():
    mask = np.zeros((8, 8), bool)
    mask[3, 5] = True
    ag = spawn_gaussians(GaussianTexture.default(mask), SQUARE)
    assert len(ag) == 1
    g = ag[0]
    assert (g.row, g.col) == (3, 5)


def test_texel_at_face_centroid_gives_centroid():
    # single face whose UV centroid is the center of texel (1, 1) of a 3x3 texture
    uv = texel_uv_centers(3, 3)[1, 1]
    tri_uv = np.array([uv + [-0.2, -0.1], uv + [0.2, -0.1], uv + [0.0, 0.2]])
    v = np.array([[0.0, 0, 0], [0.3, 0, 0.1], [0.1, 0.4, 0]])
    mesh = TriangleMesh(v, [[0, 1, 2]], uvs=tri_uv[None])
    mask = np.zeros((3, 3), bool)
    mask[1, 1] = True
    ag = spawn_gaussians(GaussianTexture.default(mask), mesh)
    assert np.allclose(ag.binding.bary[0], 1 / 3)
    assert np.allclose(ag.origin[0], v.mean(axis=0))


def test_spawn_count_512_with_40_percent_valid():
    rng = np.random.default_rng(0)
    n_valid = int(np.floor(0.4 * 512 * 512))
    mask = np.zeros(512 * 512, bool)
    mask[rng.choice(mask.size, n_valid, replace=False)] = True
    tex = GaussianTexture.default(mask.reshape(512, 512))
    ag = spawn_gaussians(tex, SQUARE)
    assert len(ag) == n_valid == 104857
    # row-major order
    key = ag.binding.rows * 512 + ag.binding.cols
    assert np.all(np.diff(key) > 0)


def test_uncovered_texel_names_it():
    half = TriangleMesh(SQUARE.vertices, [[0, 1, 2]], uvs=SQUARE.uvs[:1])
    mask = np.zeros((4, 4), bool)
    mask[0, 3] = True  # row 0 is v near 1 ... either way outside the lower-right half
    mask[3, 0] = True
    with pytest.raises(UvCoverageError, match=r"row=\d+, col=\d+"):
        bind_texture(GaussianTexture.default(mask), half)


def test_coverage_mask_full_square():
    assert coverage_mask(SQUARE, 16, 16).all()


def test_local_to_world_identity():
    t = _texel(offset=(0.1, -0.2, 0.3), quat=(0.9, 0.1, 0.2, 0.3))
    w = local_to_world(t, LocalFrame(np.eye(3), np.zeros(3), 1.0))
    assert np.allclose(w["position"], t.offset)
    assert np.allclose(w["scale"], t.scale)
    assert np.allclose(w["rotation"], t.quaternion)


def test_local_to_world_scaled_frame():
    t = _texel(offset=(0.01, 0, 0))
    w = local_to_world(t, LocalFrame(np.eye(3), np.array([1.0, 0, 0]), 2.0))
    assert np.allclose(w["position"], [1.02, 0, 0])
    assert np.allclose(w["scale"], 2 * t.scale)


def test_local_to_world_rotated_frame():
    Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    w = local_to_world(_texel(offset=(0.3, 0, 0)), LocalFrame(Rz, np.zeros(3), 1.0))
    assert np.allclose(w["position"], [0, 0.3, 0])
    assert np.allclose(w["rotmat"], Rz @ np.eye(3))


def test_attached_matches_local_to_world(rng):
    mesh = grid_patch(4, 0.3)
    tex = initial_texture(mesh, 8)
    tex.data[..., 52:56][tex.valid_mask] = rng.normal(size=(tex.n_valid, 4))
    tex.data[..., 56:59][tex.valid_mask] = 0.1 * rng.normal(size=(tex.n_valid, 3))
    x = mesh.vertices + 0.02 * rng.normal(size=mesh.vertices.shape)
    ag = attach(tex, bind_texture(tex, mesh), mesh.with_positions(x))
    moved = mesh.with_positions(x)
    for i in range(0, len(ag), 7):
        g = ag[i]
        fr = local_frame(moved, SurfacePoint(g.face, g.bary))
        w = local_to_world(tex.texel(g.row, g.col), fr)
        assert np.allclose(w["position"], g.position, atol=1e-9)
        assert np.allclose(w["rotmat"], ag.world.rotmats[i], atol=1e-9)
        assert np.allclose(w["scale"], g.scale, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_rigid_transform_moves_gaussians_rigidly(seed):
    rng = np.random.default_rng(seed)
    mesh = grid_patch(4, 0.3)
    tex = initial_texture(mesh, 8)
    tex.data[..., 56:59][tex.valid_mask] = 0.2 * rng.normal(size=(tex.n_valid, 3))
    b = bind_texture(tex, mesh)
    x = mesh.vertices + 0.02 * rng.normal(size=mesh.vertices.shape)
    R, t = random_rigid(seed)
    a1 = attach(tex, b, x, mesh.faces)
    a2 = attach(tex, b, x @ R.T + t, mesh.faces)
    assert np.abs(a1.world.means @ R.T + t - a2.world.means).max() < 1e-9
    assert np.abs(R @ a1.world.rotmats - a2.world.rotmats).max() < 1e-9
    assert np.abs(a1.world.scales - a2.world.scales).max() < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_decodings_are_monotone_bijections(a, b):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    assert sigmoid(lo) <= sigmoid(hi)
    assert np.exp(lo) <= np.exp(hi)
    if hi - lo > 1e-6:
        assert sigmoid(lo) < sigmoid(hi) and np.exp(lo) < np.exp(hi)
    p = sigmoid(a)
    if 1e-6 < p < 1 - 1e-6:
        assert logit(p) == pytest.approx(a, abs=1e-6)


def test_params_roundtrip():
    mesh = grid_patch(3, 0.3)
    tex = initial_texture(mesh, 8)
    b = bind_texture(tex, mesh)
    p = texture_params(tex, b)
    p["offset"] += 0.25
    write_texture_params(tex, b, p)
    assert np.allclose(texture_params(tex, b)["offset"], p["offset"])
    assert not tex.data[~tex.valid_mask].any()


def test_attached_backward_against_fd(rng):
    mesh = grid_patch(3, 0.3)
    tex = initial_texture(mesh, 4)
    tex.data[..., 52:56][tex.valid_mask] = rng.normal(size=(tex.n_valid, 4))
    tex.data[..., 56:59][tex.valid_mask] = 0.1 * rng.normal(size=(tex.n_valid, 3))
    b = bind_texture(tex, mesh)
    params = texture_params(tex, b)
    x0 = mesh.vertices + 0.02 * rng.normal(size=mesh.vertices.shape)
    n = len(b)
    W = [rng.normal(size=s) for s in ((n, 3), (n, 3, 3), (n, 3), (n,), (n, 16, 3))]

    def f(x, p=params):
        w = attach(tex, b, x, mesh.faces, p).world
        return sum((wi * a).sum() for wi, a in zip(W, (w.means, w.rotmats, w.scales, w.opacities, w.sh)))

    ag = attach(tex, b, x0, mesh.faces, params)
    gv, gp = attached_backward(ag, *W)
    assert rel_err(gv, central_fd(f, x0.copy(), 1e-6)) < 1e-6
    for key in ("offset", "log_scale", "quat", "opacity_logit"):
        def fk(a, key=key):
            return f(x0, {**params, key: a})
        assert rel_err(gp[key], central_fd(fk, params[key].copy(), 1e-6)) < 1e-5, key
