import numpy as np
import pytest

from affectsense.locate import (
    Method,
    ParticleSet,
    RangeMeasurement,
    gdop,
    init_particles,
    multilaterate,
    particle_filter_step,
    tdoa_solve,
    track,
    trilaterate_closed_form,
)
from affectsense.scene import AnchorSet, DegenerateGeometryError, FloorPlan
from affectsense.sim import simulate_ranging, simulate_trajectory
from oracles import gdop_dense, grid_search_2d, tdoa_cost, toa_cost

SQ = np.array([(0, 0), (4, 0), (0, 4)], float)


def test_closed_form_known_point():
    p = trilaterate_closed_form(SQ, [np.sqrt(2), np.sqrt(10), np.sqrt(10)])
    np.testing.assert_allclose(p, [1, 1], atol=1e-9)


def test_closed_form_at_anchor():
    np.testing.assert_allclose(trilaterate_closed_form(SQ, [0, 4, 4]), [0, 0], atol=1e-9)


def test_closed_form_collinear():
    with pytest.raises(DegenerateGeometryError):
        trilaterate_closed_form([(0, 0), (1, 0), (2, 0)], [1, 1, 1])


def test_closed_form_inconsistent_is_not_error():
    p = trilaterate_closed_form(SQ, [1.0, 1.0, 1.0])
    assert np.all(np.isfinite(p))


A3 = np.array([(0, 0, 0), (5, 0, 0), (0, 5, 0), (0, 0, 3)], float)


def test_multilaterate_3d_exact():
    d = [np.sqrt(14), np.sqrt(19), 3.0, np.sqrt(17)]
    est = multilaterate(A3, d, initial_guess=(0, 0, 0))
    np.testing.assert_allclose(est.position, [2, 3, 1], atol=1e-6)
    assert est.method is Method.GAUSS_NEWTON
    assert est.residual_norm < 1e-9


def test_multilaterate_needs_four_in_3d():
    with pytest.raises(DegenerateGeometryError, match="need ≥4 anchors"):
        multilaterate(A3[:3], [1, 1, 1], dimension=3)


def test_multilaterate_coplanar_3d():
    flat = np.array([(0, 0, 2), (5, 0, 2), (0, 5, 2), (5, 5, 2)], float)
    with pytest.raises(DegenerateGeometryError, match="coplanar"):
        multilaterate(flat, [1, 2, 3, 4], dimension=3)


def test_2d_mode_with_3d_anchors_holds_tag_height():
    anchors = np.array([(0, 0, 2.5), (8, 0, 2.2), (8, 6, 2.5), (0, 6, 2.2)])
    truth = np.array([3.0, 2.0, 1.2])
    d = np.linalg.norm(anchors - truth, axis=1)
    est = multilaterate(anchors, d, dimension=2)
    np.testing.assert_allclose(est.position, truth, atol=1e-6)


def _cost_trace_is_monotone(costs):
    return all(b <= a for a, b in zip(costs, costs[1:]))


@pytest.mark.parametrize("seed", range(30))
def test_multilaterate_cost_non_increasing(seed):
    rng = np.random.default_rng(seed)
    anchors = rng.uniform(0, 10, size=(5, 2))
    truth = rng.uniform(0, 10, size=2)
    d = np.linalg.norm(anchors - truth, axis=1) + rng.normal(0, 0.3, 5)
    est = multilaterate(anchors, np.abs(d), initial_guess=rng.uniform(-5, 15, 2))
    assert _cost_trace_is_monotone(est.cost_history)


def random_config(rng, dim, n, max_gdop=10.0):
    while True:
        hi = np.array([10.0, 10.0, 3.0])[:dim]
        anchors = rng.uniform(0, 1, size=(n, dim)) * hi
        truth = rng.uniform(0, 1, size=dim) * hi
        try:
            if gdop(anchors, truth) < max_gdop:
                return anchors, truth
        except DegenerateGeometryError:
            continue


@pytest.mark.parametrize("dim", [2, 3])
def test_noiseless_random_configs_recover_truth(dim):
    rng = np.random.default_rng(100 + dim)
    for _ in range(100):
        anchors, truth = random_config(rng, dim, dim + 3)
        d = np.linalg.norm(anchors - truth, axis=1)
        est = multilaterate(anchors, d, dimension=dim)
        np.testing.assert_allclose(est.position[:dim], truth, atol=1e-6)
        dd = d[1:] - d[0]
        est = tdoa_solve(anchors, dd, dimension=dim)
        np.testing.assert_allclose(est.position[:dim], truth, atol=1e-6)


def _rotation(rng, dim):
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q * np.sign(np.diag(r))


@pytest.mark.parametrize("seed", range(10))
def test_solutions_are_rigid_equivariant(seed):
    rng = np.random.default_rng(seed)
    anchors, truth = random_config(rng, 3, 6)
    d = np.linalg.norm(anchors - truth, axis=1) + rng.normal(0, 0.05, 6)
    rot, shift = _rotation(rng, 3), rng.uniform(-20, 20, 3)
    moved = anchors @ rot.T + shift
    est = multilaterate(anchors, d, dimension=3, gate=False).position
    est_moved = multilaterate(moved, d, dimension=3, gate=False).position
    np.testing.assert_allclose(est_moved, rot @ est + shift, atol=1e-6)
    dd = d[1:] - d[0]
    est = tdoa_solve(anchors, dd, dimension=3).position
    est_moved = tdoa_solve(moved, dd, dimension=3).position
    np.testing.assert_allclose(est_moved, rot @ est + shift, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_multilaterate_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    anchors = np.array([(0, 0), (10, 0), (10, 10), (0, 10)], float)
    truth = rng.uniform(1, 9, 2)
    d = np.linalg.norm(anchors - truth, axis=1) + rng.normal(0, 0.05, 4)
    est = multilaterate(anchors, d, sigmas=0.05, gate=False)
    best, _ = grid_search_2d(toa_cost(anchors, d, 0.05), (0, 0), (10, 10))
    assert np.linalg.norm(est.position[:2] - best) <= 0.02


def test_tdoa_exact_square():
    anchors = np.array([(0, 0), (8, 0), (0, 8), (8, 8)], float)
    d = np.linalg.norm(anchors - [2, 2], axis=1)
    est = tdoa_solve(anchors, d[1:] - d[0])
    np.testing.assert_allclose(est.position[:2], [2, 2], atol=1e-6)
    assert est.method is Method.TDOA


def test_tdoa_needs_four_anchors_in_2d():
    with pytest.raises(DegenerateGeometryError, match="need ≥4 anchors for TDoA"):
        tdoa_solve(SQ, [0.0, 0.0])


@pytest.mark.parametrize("seed", range(3))
def test_tdoa_matches_grid_search(seed):
    rng = np.random.default_rng(50 + seed)
    anchors = np.array([(0, 0), (10, 0), (10, 10), (0, 10)], float)
    truth = rng.uniform(2, 8, 2)
    d = np.linalg.norm(anchors - truth, axis=1)
    dd = d[1:] - d[0] + rng.normal(0, 0.05, 3)
    est = tdoa_solve(anchors, dd, sigmas=0.05)
    best, _ = grid_search_2d(tdoa_cost(anchors, dd, 0.05), (0, 0), (10, 10))
    assert np.linalg.norm(est.position[:2] - best) <= 0.02


def test_gating_drops_gross_outlier():
    anchors = np.array([(0, 0), (10, 0), (10, 10), (0, 10), (5, -2), (5, 12), (-2, 5), (12, 5)], float)
    truth = np.array([4.0, 6.0])
    d = np.linalg.norm(anchors - truth, axis=1)
    d[2] += 1.0
    est = multilaterate(anchors, d, sigmas=0.05)
    assert est.gated == 1
    np.testing.assert_allclose(est.position[:2], truth, atol=1e-6)


def test_gdop_unit_square_centre():
    assert gdop([(0, 0), (1, 0), (1, 1), (0, 1)], (0.5, 0.5)) == pytest.approx(1.0, abs=1e-12)


def test_gdop_collinear_anchors():
    line = [(0, 0), (1, 0), (2, 0)]
    assert np.isfinite(gdop(line, (1, 1)))
    with pytest.raises(DegenerateGeometryError):
        gdop(line, (3, 0))
    with pytest.raises(DegenerateGeometryError):
        gdop(line, (1, 0))


@pytest.mark.parametrize("seed", range(20))
def test_gdop_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    dim = 2 + seed % 2
    anchors = rng.uniform(-5, 5, size=(4, dim))
    point = rng.uniform(-5, 5, size=dim)
    assert gdop(anchors, point) == pytest.approx(gdop_dense(anchors, point), abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_gdop_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    anchors = rng.uniform(-5, 5, size=(5, 3))
    point = rng.uniform(-5, 5, size=3)
    rot, shift = _rotation(rng, 3), rng.uniform(-10, 10, 3)
    assert gdop(anchors @ rot.T + shift, rot @ point + shift) == pytest.approx(gdop(anchors, point), abs=1e-9)


ANCHORS = AnchorSet(
    ("A0", "A1", "A2", "A3"), np.array([(0, 0, 2.5), (10, 0, 2.2), (10, 10, 2.5), (0, 10, 2.2)])
)


def _measure(point, sigma=0.05, t=0.0, dist=None):
    d = np.linalg.norm(ANCHORS.positions - point, axis=1) if dist is None else dist
    return [RangeMeasurement("T", aid, t, float(di), sigma) for aid, di in zip(ANCHORS.ids, d)]


def test_pf_concentrated_at_truth():
    truth = np.array([3.0, 4.0, 1.2])
    state = ParticleSet(np.tile(truth, (50, 1)), np.full(50, 1 / 50), 1)
    new, est = particle_filter_step(state, _measure(truth), ANCHORS, 0.0)
    np.testing.assert_allclose(est.position, truth, atol=1e-12)
    np.testing.assert_allclose(new.weights, 1 / 50, atol=1e-15)
    assert est.method is Method.PARTICLE_FILTER


@pytest.mark.parametrize("seed", range(10))
def test_pf_weights_normalised(seed):
    rng = np.random.default_rng(seed)
    state = init_particles(rng.uniform(0, 10, 3), rng.uniform(0.1, 3), 300, seed)
    new, _ = particle_filter_step(state, _measure(rng.uniform(0, 10, 3), sigma=rng.uniform(0.01, 1)), ANCHORS, 0.1)
    assert abs(new.weights.sum() - 1.0) <= 1e-9
    assert np.all(new.weights >= 0)


def test_pf_bit_reproducible():
    state = init_particles((5, 5, 1.2), 1.0, 400, seed=42, dimension=2)
    meas = _measure(np.array([5.3, 4.8, 1.2]))
    a_state, a_est = particle_filter_step(state, meas, ANCHORS, 0.1, dimension=2)
    b_state, b_est = particle_filter_step(state, meas, ANCHORS, 0.1, dimension=2)
    assert a_state.positions.tobytes() == b_state.positions.tobytes()
    assert a_state.weights.tobytes() == b_state.weights.tobytes()
    assert a_est.position.tobytes() == b_est.position.tobytes()


def test_pf_underflow_resets_and_flags():
    state = init_particles((1, 1, 1.2), 0.01, 100, seed=3)
    far = _measure(np.array([9.0, 9.0, 1.2]), sigma=0.01)
    new, est = particle_filter_step(state, far, ANCHORS, 0.0)
    assert est.flagged
    assert est.residual_norm == 1e9
    np.testing.assert_allclose(new.weights, 1 / 100)


def test_pf_straight_walk_rmse():
    plan = FloorPlan((0, 0, 0), (10, 10, 3))
    traj = simulate_trajectory(plan, [(1, 5, 1.2), (9, 5, 1.2)], speed=0.4, dt=0.1)
    traj_times, traj_pos = traj.times[:200], traj.positions[:200]
    ranges = simulate_ranging(traj, ANCHORS, 0.05, seed=11)
    ranges = [r for r in ranges if r.timestamp <= traj_times[-1] + 1e-9]
    est = track(ranges, ANCHORS, Method.PARTICLE_FILTER, dimension=2, seed=5)
    assert len(est) == 200
    err = np.array([e.position for e in est]) - traj_pos
    rmse = float(np.sqrt(np.mean(np.sum(err**2, axis=1))))
    assert rmse <= 0.3
