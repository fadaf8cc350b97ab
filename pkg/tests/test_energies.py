import numpy as np
import pytest

from garmentsplat.energies import (EnergyGrad, MaterialParams, bending_energy, body_penetration_energy,
                                   build_virtual_edges, compute_collisions, gaussian_regularizer_arrays,
                                   gaussian_regularizers, strain_energy, virtual_edge_energy, virtual_edge_list)
from garmentsplat.errors import DegenerateFace, MissingRestState, StaleCollisionSet, ValidationError
from garmentsplat.mesh import TriangleMesh, build_face_rest_states, build_topology
from garmentsplat.scenes import grid_patch, tube
from garmentsplat.texture import GaussianTexture

from conftest import random_rigid
from suites import energy_gradient_suite, invariance_suite

# two unit right triangles sharing the edge (0,0,0)-(0,1,0): rest edge 1 m, rest area sum 1 m^2
HINGE = np.array([[0.0, 0, 0], [0, 1, 0], [1, 0, 0], [-1, 0, 0]])
HINGE_FACES = [[0, 1, 3], [0, 2, 1]]


def _fold(theta):
    """Rotate the second wing about the shared edge by ``theta``."""
    x = HINGE.copy()
    x[2] = [np.cos(theta), 0, np.sin(theta)]
    return x


def test_bending_flat_pair_is_zero():
    mesh = TriangleMesh(HINGE, HINGE_FACES)
    assert bending_energy(mesh, build_topology(mesh)).value == 0.0


def test_bending_folded_quarter_turn():
    mesh = TriangleMesh(HINGE, HINGE_FACES)
    top = build_topology(mesh)
    assert np.isclose(top.pair_rest_edge_length[0], 1.0) and np.isclose(top.pair_rest_area_sum[0], 1.0)
    for sign in (1, -1):
        e = bending_energy(_fold(sign * np.pi / 2), top)
        # independent closed form: (1/1) * (pi/2)^2
        assert e.value == pytest.approx((np.pi / 2) ** 2, rel=1e-12)
        assert e.value == pytest.approx(2.4674011, rel=1e-7)


def test_bending_rigid_rotation_of_folded_pair():
    mesh = TriangleMesh(HINGE, HINGE_FACES)
    top = build_topology(mesh)
    x = _fold(1.1)
    R, t = random_rigid(4)
    assert abs(bending_energy(x, top).value - bending_energy(x @ R.T + t, top).value) < 1e-9


def test_bending_smooth_near_pi():
    mesh = TriangleMesh(HINGE, HINGE_FACES)
    top = build_topology(mesh)
    vals = [bending_energy(_fold(np.pi + d), top).value for d in (-1e-4, 1e-4)]
    assert np.isfinite(vals).all()


def test_bending_degenerate_current_face():
    mesh = TriangleMesh(HINGE, HINGE_FACES)
    x = HINGE.copy()
    x[3] = [0, 0.5, 0]
    with pytest.raises(DegenerateFace):
        bending_energy(x, build_topology(mesh))


def test_strain_examples():
    tri = TriangleMesh(np.array([[0.0, 0, 0], [0.1, 0, 0], [0.03, 0.08, 0]]), [[0, 1, 2]])
    mat = MaterialParams(2.1e4, 1.15e4, 5e-4)
    rest = build_face_rest_states(tri, mat.thickness)
    # exact up to rounding in the inverted rest matrix
    assert strain_energy(tri, tri.faces, rest, mat).value < 1e-20
    V = rest.volume[0]
    expected = V * (mat.lame_lambda / 2 * 0.0441 + mat.lame_mu * 0.02205)
    stretched = tri.vertices * 1.1
    assert strain_energy(stretched, tri.faces, rest, mat).value == pytest.approx(expected, rel=1e-12)
    R, t = random_rigid(0)
    assert strain_energy(tri.vertices @ R.T + t, tri.faces, rest, mat).value < 1e-20
    with pytest.raises(MissingRestState):
        strain_energy(tri, tri.faces, None, mat)


def test_material_validation():
    with pytest.raises(ValidationError):
        MaterialParams(lame_mu=0.0)
    with pytest.raises(ValidationError):
        MaterialParams(lame_lambda=-1.0)
    with pytest.raises(ValidationError):
        MaterialParams(thickness=0.0)


def _plane_body():
    """Unit square in z=0 with +z normal."""
    v = np.array([[-1.0, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]])
    return TriangleMesh(v, [[0, 1, 2], [0, 2, 3]])


@pytest.mark.parametrize("z,expected", [(5e-3, 0.0), (1e-3, 8e-9), (3e-3, 0.0)])
def test_body_term_examples(z, expected):
    x = np.array([[0.1, 0.2, z]])
    cs = compute_collisions(x, _plane_body())
    e = body_penetration_energy(x, cs, 3e-3)
    assert e.value == pytest.approx(expected, rel=1e-9, abs=1e-24)


def test_body_term_stale_set():
    x = np.array([[0.1, 0.2, 1e-3]])
    cs = compute_collisions(x, _plane_body())
    with pytest.raises(StaleCollisionSet):
        body_penetration_energy(x + 1e-4, cs)


def test_virtual_edges_flat_sheet_has_none():
    assert len(build_virtual_edges(grid_patch(4, 0.3))) == 0


def _facing_quads(gap=0.05):
    # lower quad normal +z... flipped so the two sheets face outward (away from each other)
    lo = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    hi = lo + [0, 0, gap]
    v = np.vstack([lo, hi])
    faces = [[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7]]  # lower faces -z, upper faces +z
    return TriangleMesh(v, faces)


def test_virtual_edges_between_parallel_quads():
    ves = build_virtual_edges(_facing_quads())
    # every face takes part; each unordered face pair is stored once
    assert set(ves.face_a) | set(ves.face_b) == {0, 1, 2, 3}
    assert len(ves) == 2
    assert np.allclose(ves.rest_length, 0.05)
    for ve in virtual_edge_list(ves):
        assert ve.face_a != ve.face_b and ve.rest_length > 0


def test_virtual_edges_tube_pairs_across_axis():
    t = tube(0.1, 0.1, 0.1, -0.1, 8, 2)  # 16 faces
    ves = build_virtual_edges(t)
    cent = t.vertices[t.faces].mean(axis=1)
    covered = set(ves.face_a) | set(ves.face_b)
    assert covered == set(range(t.n_faces))
    # brute force: the partner sits on the far side of the axis
    for a, b in zip(ves.face_a, ves.face_b):
        assert np.dot(cent[a][[0, 2]], cent[b][[0, 2]]) < 0


def test_virtual_edge_energy_examples():
    t = _facing_quads(0.10)
    ves = build_virtual_edges(t)
    assert virtual_edge_energy(t.vertices, t.faces, ves).value == 0.0
    far = t.vertices.copy()
    far[4:, 2] = 0.2
    assert virtual_edge_energy(far, t.faces, ves).value == 0.0
    near = t.vertices.copy()
    near[4:, 2] = 0.06
    e = virtual_edge_energy(near, t.faces, ves)
    assert e.value == pytest.approx(len(ves) * 0.04**2, rel=1e-9)
    at = virtual_edge_energy(t.vertices, t.faces, ves)
    assert not np.any(at.grad)


def test_gaussian_regularizer_examples():
    mask = np.ones((2, 2), bool)
    tex = GaussianTexture.default(mask, log_scale=np.log(0.5))
    l_pos, l_scale, _ = gaussian_regularizers(tex, 0.5, 1.0)
    assert l_pos == 0.0 and l_scale == 0.0
    off = np.zeros((1, 3))
    off[0, 0] = 0.51
    l_pos, _, g_mu, _ = gaussian_regularizer_arrays(off, np.zeros((1, 3)) - 5, 0.5, 1.0)
    assert l_pos == pytest.approx(0.01, rel=1e-9)
    assert np.allclose(g_mu, [[1.0, 0, 0]])


def test_energygrad_algebra():
    a = EnergyGrad(1.0, np.ones((2, 3)))
    b = EnergyGrad(2.0, np.ones((2, 3)))
    assert (a + b).value == 3.0 and np.all((a + b).grad == 2)
    assert a.scaled(3).value == 3.0


def test_gradient_suite_50_instances():
    worst = energy_gradient_suite(50)
    for name, err in worst.items():
        assert err < 1e-4, (name, err)


def test_invariance_suite_20_meshes():
    out = invariance_suite(20)
    assert out["rigid_rel_change"] < 1e-8
    assert out["rest_value"] < 1e-12
    assert out["net_force"] < 1e-8
