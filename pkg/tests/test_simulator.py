import numpy as np
import pytest

from garmentsplat.errors import DivergedSimulation, InvalidScaleField, TopologyMismatch, ValidationError
from garmentsplat.mesh import TriangleMesh
from garmentsplat.scenes import capsule, grid_patch, make_synthetic_scene, tube
from garmentsplat.simulator import (BodyMotion, Garment, MaterialField, RestGeometry, SimConfig, SimState,
                                    fit_behavior, lumped_masses, relax, resize, rollout_l2, simulate, step,
                                    untangle_all, untangle_one)

ZERO_G = SimConfig(gravity=(0.0, 0.0, 0.0))


def _patch(n=5, size=0.2, height=0.0):
    m = grid_patch(n, size, height)
    return m, RestGeometry.from_mesh(m), MaterialField.uniform(m.n_vertices)


def convex_depth(points, body: TriangleMesh):
    """Signed distance to a convex closed mesh, exact inside: max over face planes."""
    v = body.vertices[body.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n /= np.linalg.norm(n, axis=1)[:, None]
    c = body.vertices.mean(axis=0)
    n *= np.sign(np.einsum("fi,fi->f", n, v[:, 0] - c))[:, None]
    return np.einsum("pfi,fi->pf", points[:, None, :] - v[None, :, 0], n).max(axis=1)


def ray_hits(origins, dirs, mesh: TriangleMesh):
    """Nearest hit distance per ray by brute-force Moller-Trumbore over every face."""
    v = mesh.vertices[mesh.faces]
    e1, e2 = v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]
    p = np.cross(dirs[:, None, :], e2[None])
    det = np.einsum("fi,rfi->rf", e1, p)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origins[:, None, :] - v[None, :, 0]
    u = np.einsum("rfi,rfi->rf", s, p) * inv
    q = np.cross(s, e1[None])
    w = np.einsum("ri,rfi->rf", dirs, q) * inv
    t = np.einsum("fi,rfi->rf", e2, q) * inv
    hit = ok & (u >= 0) & (w >= 0) & (u + w <= 1) & (t > 0)
    return np.where(hit, t, np.inf).min(axis=1)


# ------------------------------------------------------------------ step

def test_equilibrium_is_unchanged():
    m, rest, mat = _patch()
    s = step(SimState.at_rest(m.vertices), mat, rest, cfg=ZERO_G)
    assert np.abs(s.x - m.vertices).max() < 1e-9 and np.abs(s.v).max() < 1e-9


def test_free_fall_gains_exactly_g():
    m, rest, mat = _patch()
    cfg = SimConfig()
    v0 = np.tile([0.01, 0.0, -0.02], (m.n_vertices, 1))
    s = step(SimState(m.vertices, v0), mat, rest, cfg=cfg)
    g = np.array([0.0, -9.81, 0.0]) * cfg.frame_dt**2
    assert np.abs(s.v - (v0 + g)).max() < 1e-12
    assert np.abs(s.x - (m.vertices + v0 + g)).max() < 1e-12


def test_vertex_inside_body_is_projected_out():
    body = capsule(0.1, 0.1, 24, 6)
    m, rest, mat = _patch(5, 0.1, 0.2)
    x = m.vertices.copy()
    # top of the capsule is at y = 0.2; sink the centre vertex 5 mm into it
    x[12, 1] = 0.195
    assert convex_depth(x[12:13], body)[0] < -4e-3
    s = step(SimState.at_rest(x), mat, rest, body, cfg=ZERO_G)
    assert convex_depth(s.x, body).min() >= -1e-4


def test_no_penetration_while_draping():
    body = capsule(0.1, 0.1, 24, 6)
    m, rest, mat = _patch(7, 0.3, 0.23)
    xs = simulate(SimState.at_rest(m.vertices), mat, rest, n_frames=15, static_body=body)
    for x in xs[1:]:
        assert convex_depth(x, body).min() >= -1e-4
    assert xs[-1][:, 1].min() < 0.15  # it did fall around the body


def test_momentum_conserved_without_external_forces():
    m, rest, mat = _patch(6, 0.2)
    x = m.vertices * [1.1, 1.0, 0.9]
    mass = lumped_masses(rest, mat, ZERO_G.density)
    com0 = mass @ x / mass.sum()
    xs = simulate(SimState.at_rest(x), mat, rest, n_frames=100, cfg=ZERO_G)
    drift = np.abs(np.einsum("n,tni->ti", mass, xs) / mass.sum() - com0).max()
    assert drift < 1e-6
    assert np.abs(xs[-1] - x).max() > 1e-3  # something did move


def test_step_is_deterministic():
    m, rest, mat = _patch()
    rng = np.random.default_rng(0)
    st = SimState(m.vertices + 0.003 * rng.standard_normal(m.vertices.shape), np.zeros_like(m.vertices))
    body = capsule(0.1, 0.1, 12, 4)
    a = step(st, mat, rest, body)
    b = step(st, mat, rest, body)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v)


def test_step_errors():
    m, rest, mat = _patch()
    with pytest.raises(ValidationError):
        step(SimState.at_rest(m.vertices[:-1]), mat, rest)
    with pytest.raises(DivergedSimulation):
        SimState(np.full((3, 3), np.nan), np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        MaterialField.uniform(3, (1, 1, 0, 1))
    with pytest.raises(TopologyMismatch):
        BodyMotion([capsule(0.1, 0.1, 12, 4), capsule(0.1, 0.1, 10, 4)])


# --------------------------------------------------------------- resize

def test_resize_identity_and_uniform():
    _, rest, _ = _patch()
    same = resize(rest, np.ones(rest.n_vertices))
    assert np.array_equal(same.edge_lengths, rest.edge_lengths)
    assert np.array_equal(same.rest_angles, rest.rest_angles)
    big = resize(rest, np.full(rest.n_vertices, 1.2))
    assert np.allclose(big.edge_lengths, 1.2 * rest.edge_lengths, rtol=1e-15, atol=0)
    assert np.allclose(big.face_rest_states().area, 1.44 * rest.face_rest_states().area, rtol=1e-12)


def test_resize_endpoint_mean():
    _, rest, _ = _patch(3)
    s = np.linspace(0.5, 2.0, rest.n_vertices)
    out = resize(rest, s)
    e = rest.topology.edges
    for j in range(rest.topology.n_edges):
        assert out.edge_lengths[j] == pytest.approx(rest.edge_lengths[j] * (s[e[j, 0]] + s[e[j, 1]]) / 2, rel=1e-15)


@pytest.mark.parametrize("bad", ["zero", "negative", "nan", "short"])
def test_resize_invalid_field(bad):
    _, rest, _ = _patch()
    s = np.ones(rest.n_vertices)
    if bad == "zero":
        s[3] = 0
    elif bad == "negative":
        s[0] = -1
    elif bad == "nan":
        s[1] = np.nan
    else:
        s = s[:-1]
    with pytest.raises(InvalidScaleField):
        resize(rest, s)


def test_resize_relaxes_to_scaled_patch():
    m, rest, mat = _patch(7, 0.3)
    big = resize(rest, np.full(rest.n_vertices, 1.2))
    x = relax(m.vertices, mat, big, n_frames=300, cfg=ZERO_G, tol=1e-7)
    corners = [0, 6, 48, 42]
    side = np.mean([np.linalg.norm(x[corners[i]] - x[corners[(i + 1) % 4]]) for i in range(4)])
    assert abs(side / 0.3 - 1.2) < 0.06


# ------------------------------------------------------- behavior fitting

@pytest.fixture(scope="module")
def hang():
    mstar = (3.0, 0.5, 0.5, 1.5)
    n = grid_patch(9).n_vertices
    sc = make_synthetic_scene("patch_hang", 0, render=False, noise=2e-3, material=MaterialField.uniform(n, mstar))
    return sc, mstar


def test_fit_recovers_known_material(hang):
    sc, mstar = hang
    pins = sc.extra["pins"]
    n = sc.garment.n_vertices
    l2_star = rollout_l2(sc.gt_positions, None, MaterialField.uniform(n, mstar), sc.rest, sc.sim_config, pins)
    l2_default = rollout_l2(sc.gt_positions, None, MaterialField.uniform(n), sc.rest, sc.sim_config, pins)
    mat, rest, rep = fit_behavior(sc.gt_positions, None, MaterialField.uniform(n), sc.rest, sc.sim_config,
                                  pin_indices=pins, return_report=True)
    l2_fit = rollout_l2(sc.gt_positions, None, mat, rest, sc.sim_config, pins)
    assert l2_fit <= 1.05 * l2_star
    assert l2_fit < l2_default
    assert rep.final_l2 == pytest.approx(l2_fit, rel=1e-9)
    assert rep.evaluations <= 200


def test_fit_static_pair_returns_initial():
    m, rest, mat = _patch()
    seq = np.stack([m.vertices, m.vertices])
    out_mat, out_rest = fit_behavior(seq, None, mat, rest, ZERO_G, max_evals=20)
    assert np.array_equal(out_mat.values, mat.values)
    assert np.array_equal(out_rest.edge_lengths, rest.edge_lengths)


def test_fit_never_worse_than_start(hang):
    sc, _ = hang
    pins = sc.extra["pins"]
    n = sc.garment.n_vertices
    init = MaterialField.uniform(n, (2.0, 1.0, 0.7, 1.0))
    l0 = rollout_l2(sc.gt_positions[:6], None, init, sc.rest, sc.sim_config, pins)
    mat, rest = fit_behavior(sc.gt_positions[:6], None, init, sc.rest, sc.sim_config, max_evals=8,
                             pin_indices=pins)
    assert rollout_l2(sc.gt_positions[:6], None, mat, rest, sc.sim_config, pins) <= l0


def test_fit_errors():
    m, rest, mat = _patch()
    with pytest.raises(TopologyMismatch):
        fit_behavior([m.vertices, m.vertices[:-1]], None, mat, rest)
    with pytest.raises(ValidationError):
        fit_behavior([m.vertices], None, mat, rest)
    with pytest.raises(ValidationError):
        fit_behavior([m.vertices, m.vertices], None, mat, rest, method="newton")


# ------------------------------------------------------------ untangling

def _radial_rays(n=400, seed=0, half_height=0.15):
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0, 2 * np.pi, n)
    o = np.stack([np.zeros(n), rng.uniform(-half_height, half_height, n), np.zeros(n)], 1)
    d = np.stack([np.cos(ang), np.zeros(n), np.sin(ang)], 1)
    return o, d


def _order_fraction(garments):
    o, d = _radial_rays()
    hits = [ray_hits(o, d, g.mesh.with_positions(g.positions)) for g in garments]
    ok = np.all(np.isfinite(hits), axis=0)
    for a, b in zip(hits[:-1], hits[1:]):
        ok &= a < b
    return ok.mean()


def _radius(g):
    return np.linalg.norm(g.positions[:, [0, 2]], axis=1)


@pytest.fixture(scope="module")
def two_cyl():
    sc = make_synthetic_scene("two_cylinders", 0, render=False)
    gs, body = sc.extra["garments"], sc.extra["body"]
    return gs, body, untangle_all(gs, body, n_epochs=2)


def test_two_cylinders_layer_order(two_cyl):
    gs, body, out = two_cyl
    assert _order_fraction(gs) < 0.05  # really inverted at the start
    assert _order_fraction(out) >= 0.95
    assert _radius(out[1]).mean() > _radius(out[0]).mean()
    for g in out:
        assert convex_depth(g.positions, body).min() >= -1e-4


def test_untangle_keeps_topology_and_rest(two_cyl):
    gs, _, out = two_cyl
    for a, b in zip(gs, out):
        assert np.array_equal(a.mesh.faces, b.mesh.faces)
        assert np.array_equal(a.rest.edge_lengths, b.rest.edge_lengths)
        assert np.array_equal(a.rest.rest_angles, b.rest.rest_angles)
        assert np.array_equal(a.material.values, b.material.values)


def test_untangle_trivial_cases():
    body = capsule(0.1, 0.25, 12, 4)
    t = tube(0.13, 0.13, 0.2, -0.2, 12, 4)
    g = Garment(t, RestGeometry.from_mesh(t))
    out = untangle_all([g], body)
    assert len(out) == 1 and np.array_equal(out[0].positions, t.vertices)
    inner = tube(0.12, 0.12, 0.2, -0.2, 12, 4)
    out = untangle_one(g, [Garment(inner, RestGeometry.from_mesh(inner))], n_epochs=0, body=body)
    assert np.array_equal(out[0].positions, t.vertices) and np.array_equal(out[1].positions, inner.vertices)


def test_correct_layering_barely_moves():
    body = capsule(0.10, 0.25, 24, 6)
    gs = [tube(r, r, 0.2, -0.2, 20, 5) for r in (0.12, 0.15)]
    gs = [Garment(t, RestGeometry.from_mesh(t)) for t in gs]
    out = untangle_all(gs, body, n_epochs=2)
    for a, b in zip(gs, out):
        assert np.linalg.norm(b.positions - a.positions, axis=1).mean() < 1e-3


def test_three_layers_outer_two_swapped():
    body = capsule(0.10, 0.25, 24, 6)
    # rest sizes grow outwards (a < b < c) but b and c start at each other's radius
    gs = []
    for rest_r, start_r in ((0.12, 0.12), (0.14, 0.16), (0.16, 0.14)):
        t = tube(rest_r, rest_r, 0.2, -0.2, 20, 5)
        start = tube(start_r, start_r, 0.2, -0.2, 20, 5).vertices
        gs.append(Garment(t.with_positions(start), RestGeometry.from_mesh(t)))
    assert _order_fraction(gs) < 0.05
    out = untangle_all(gs, body, n_epochs=2)
    assert _order_fraction(out) >= 0.95
