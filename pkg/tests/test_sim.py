import numpy as np
import pytest
from scipy.linalg import expm

from tsbridge import dynamics as D
from tsbridge.errors import DataError, EndpointSingularity, NonFiniteState
from tsbridge.experiments import synthetic_bridges, synthetic_operator
from tsbridge.gtsb import GTSBridge, marginal
from tsbridge.measures import GaussianMeasure
from tsbridge.metrics import bures_wasserstein
from tsbridge.sim import (
    PolicyPair,
    TimeGrid,
    euler_maruyama,
    hutchinson_divergence,
    likelihood_bound,
    optimal_gaussian_policies,
    probability_flow,
    simulate_doob_bridge,
    simulate_fb_tsde,
    simulate_gtsb,
    simulate_reverse_score,
    write_ensemble_csv,
)
from tsbridge.spectral import eigendecompose


def terminal_grid(steps=500, delta=1e-3):
    pts = np.linspace(0.0, 1.0, steps + 1)
    pts[-1] = 1.0 - delta
    return TimeGrid(pts)


def zero(t, x):
    return np.zeros_like(x)


def test_grid_validation():
    with pytest.raises(DataError):
        TimeGrid([0.0, 0.5, 0.5])
    with pytest.raises(DataError):
        TimeGrid([0.0, 1.2])
    g = TimeGrid.uniform(steps=4)
    assert g.steps == 4 and g.end == 1.0


def test_constant_without_drift_or_noise(rng):
    init = rng.normal(size=(7, 3))
    ens = euler_maruyama(zero, lambda t: 0.0, init, TimeGrid.uniform(steps=20), 0)
    np.testing.assert_array_equal(ens.states, np.broadcast_to(init[:, None], ens.states.shape))


def test_brownian_variance():
    m = 20000
    ens = euler_maruyama(zero, lambda t: 1.0, np.zeros((m, 2)), TimeGrid.uniform(steps=50), 4, record=[1.0])
    var = ens.final.var(axis=0, ddof=1)
    assert np.all(np.abs(var - 1.0) < 3 * np.sqrt(2.0 / m))


def test_heat_diffusion_of_a_spike():
    op = synthetic_operator()
    dyn = D.tsheat_bm(op, 0.5, 1.0)
    spike = np.zeros(30)
    spike[0] = 1.0
    exact = expm(-0.5 * op.matrix) @ spike
    errs = []
    for steps in (500, 1000):
        ens = euler_maruyama(lambda t, x: D.drift(dyn, t, x), lambda t: 0.0, spike[None],
                             TimeGrid.uniform(steps=steps), 0, record=[1.0])
        errs.append(np.abs(ens.final[0] - exact).max())
    # first-order scheme: the error halves with the step
    assert errs[1] < 1e-4
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)


def test_threads_do_not_change_results(small_op):
    dyn = D.tsheat_bm(small_op, 0.5, 1.0)
    init = np.zeros((2500, small_op.dim))
    grid = TimeGrid.uniform(steps=20)
    a = euler_maruyama(lambda t, x: D.drift(dyn, t, x), dyn.g, init, grid, 7, threads=1)
    b = euler_maruyama(lambda t, x: D.drift(dyn, t, x), dyn.g, init, grid, 7, threads=3)
    np.testing.assert_array_equal(a.states, b.states)
    c = euler_maruyama(lambda t, x: D.drift(dyn, t, x), dyn.g, init, grid, 8)
    assert not np.array_equal(a.states, c.states)


def test_divergence_is_reported():
    with pytest.raises(NonFiniteState) as info, np.errstate(over="ignore", invalid="ignore"):
        euler_maruyama(lambda t, x: 1e200 * x * x, lambda t: 0.0, np.ones((2, 1)), TimeGrid.uniform(steps=10), 0)
    assert info.value.step >= 1


def test_record_and_csv(tmp_path, rng):
    grid = TimeGrid.uniform(steps=4)
    ens = euler_maruyama(zero, lambda t: 1.0, np.zeros((3, 2)), grid, 1, record=[0.5, 1.0])
    np.testing.assert_allclose(ens.times, [0.5, 1.0])
    with pytest.raises(DataError):
        euler_maruyama(zero, lambda t: 1.0, np.zeros((3, 2)), grid, 1, record=[0.3])
    path = tmp_path / "e.csv"
    write_ensemble_csv(path, ens)
    rows = path.read_text().splitlines()
    assert rows[0] == "path_id,t,x_0,x_1" and len(rows) == 7


def test_synthetic_bm_bridge_reaches_target():
    bridge = synthetic_bridges(ve_cs=())["bm"]
    ens = simulate_gtsb(bridge, bridge.nu0.sample(20000, 1), terminal_grid(), 2, record=[1 - 1e-3])
    emp = np.cov(ens.final, rowvar=False)
    assert bures_wasserstein(emp, bridge.nu1.cov) < 0.05 * bures_wasserstein(bridge.nu0.cov, bridge.nu1.cov)


def test_stationary_bridge_keeps_marginals(small_op):
    dyn = D.tsheat_bm(small_op, 0.5, 1.0)
    stat = GaussianMeasure(np.zeros(small_op.dim), small_op.assemble(1.0 / (small_op.eigenvalues + 1.0)))
    bridge = GTSBridge(dyn, stat, stat)
    ens = simulate_gtsb(bridge, stat.sample(20000, 3), terminal_grid(), 4, record=[0.25, 0.5, 0.75])
    for t in (0.25, 0.5, 0.75):
        ref = marginal(bridge, t).measure.cov
        emp = np.cov(ens.at(t), rowvar=False)
        assert np.linalg.norm(emp - ref) / np.linalg.norm(ref) < 0.05
        assert np.linalg.norm(ref - stat.cov) / np.linalg.norm(stat.cov) < 0.5


def test_reverse_score_scalar_ou():
    op = eigendecompose(np.array([[1.0]]))
    dyn = D.tsheat_bm(op, 1.0, 1.0)
    nu0 = GaussianMeasure(np.array([2.0]), np.array([[0.25]]))
    m = 20000
    res = simulate_reverse_score(dyn, nu0, TimeGrid.uniform(steps=400), m, 5, record=[0.0, 1.0])
    x = res.backward.at(0.0)[:, 0]
    assert abs(x.mean() - 2.0) < 3 * 0.5 / np.sqrt(m) + 5e-3
    assert abs(x.var(ddof=1) - 0.25) < 3 * 0.25 * np.sqrt(2.0 / m) + 5e-3


def test_zero_diffusion_is_rejected(small_op):
    with pytest.raises(DataError):
        D.general_linear(small_op, [0.0, -1.0], lambda t: 0.0 * t)


def test_brownian_doob_variance():
    op = eigendecompose(np.zeros((2, 2)))
    dyn = D.general_linear(op, [0.0], 1.0)
    m = 20000
    ens = simulate_doob_bridge(dyn, np.zeros(2), np.ones(2), terminal_grid(), m, 6, record=[0.25, 0.5, 0.75])
    for t in (0.25, 0.5, 0.75):
        x = ens.at(t)
        var = x.var(axis=0, ddof=1)
        assert np.all(np.abs(var - t * (1 - t)) < 3 * t * (1 - t) * np.sqrt(2.0 / m))
        assert np.all(np.abs(x.mean(axis=0) - t) < 3 * np.sqrt(t * (1 - t) / m))


def test_doob_on_target_follows_free_mean(small_op, rng):
    dyn = D.tsheat_bm(small_op, 0.5, 0.5)
    x0 = rng.normal(size=small_op.dim)
    x1 = D.cond_mean(dyn, 1.0, 0.0, x0)
    ens = simulate_doob_bridge(dyn, x0, x1, terminal_grid(200), 4000, 2, record=[0.5])
    np.testing.assert_allclose(ens.at(0.5).mean(axis=0), D.cond_mean(dyn, 0.5, 0.0, x0), atol=0.03)


def test_doob_pinning_improves_with_delta(small_op, rng):
    dyn = D.tsheat_bm(small_op, 0.5, 1.0)
    x0, x1 = rng.normal(size=(2, small_op.dim))
    devs = []
    for delta in (1e-1, 1e-2, 1e-3):
        grid = TimeGrid.uniform(0.0, 1.0 - delta, 1000)
        ens = simulate_doob_bridge(dyn, x0, x1, grid, 2000, 3, record=[grid.end])
        devs.append(np.linalg.norm(ens.final - x1, axis=1).mean())
    assert devs[0] > devs[1] > devs[2]
    with pytest.raises(EndpointSingularity):
        simulate_doob_bridge(dyn, x0, x1, TimeGrid.uniform(steps=10), 10, 0)


def test_fb_with_zero_policies_is_reference(small_op, rng):
    dyn = D.tsheat_bm(small_op, 0.5, 1.0)
    grid = TimeGrid.uniform(steps=50)
    x0, x1 = rng.normal(size=(2, 300, small_op.dim))
    res = simulate_fb_tsde(dyn, PolicyPair.zero(), x0, x1, grid, 9)
    ref = euler_maruyama(lambda t, x: D.drift(dyn, t, x), dyn.g, x0, grid, 9, stream=1)
    np.testing.assert_array_equal(res.forward.states, ref.states)


def test_fb_with_score_policy_is_reverse_sampler(small_op):
    dyn = D.tsheat_ve(small_op, 1.0, 0.1, 1.0)
    nu0 = GaussianMeasure(np.ones(small_op.dim), np.eye(small_op.dim))
    grid = TimeGrid(np.linspace(0.0, 1.0, 101))
    rs = simulate_reverse_score(dyn, nu0, grid, 500, 3)
    def zhat(t, x):
        return float(dyn.g(t)) * D.analytic_score(dyn, nu0, t, x)

    pol = PolicyPair(zero, zhat)
    res = simulate_fb_tsde(dyn, pol, rs.forward.final, rs.forward.final, grid, 3)
    np.testing.assert_allclose(res.backward.at(0.0), rs.backward.at(0.0), atol=1e-8)


def test_optimal_policies_reach_target(small_op, rng):
    n = small_op.dim
    a = rng.normal(size=(n, n))
    nu0 = GaussianMeasure(np.zeros(n), np.eye(n))
    nu1 = GaussianMeasure(np.ones(n), a @ a.T / n + 0.2 * np.eye(n))
    bridge = GTSBridge(D.tsheat_bm(small_op, 0.5, 1.0), nu0, nu1)
    pol = optimal_gaussian_policies(bridge)
    m = 20000
    res = simulate_fb_tsde(bridge.dyn, pol, nu0.sample(m, 1), nu1.sample(m, 2), terminal_grid(), 3,
                           record=[0.0, 1 - 1e-3])
    x = res.forward.final
    se = np.sqrt(np.diag(nu1.cov) / m)
    assert np.all(np.abs(x.mean(axis=0) - nu1.mean) < 3 * se + 5e-3)
    assert np.linalg.norm(np.cov(x, rowvar=False) - nu1.cov) / np.linalg.norm(nu1.cov) < 0.05


def test_zero_policy_bound_is_zero(small_op, rng):
    dyn = D.tsheat_bm(small_op, 0.5, 1.0)
    est = likelihood_bound(dyn, PolicyPair.zero(), rng.normal(size=small_op.dim), TimeGrid.uniform(steps=20),
                           50, 2, 0)
    assert est.value == 0.0


def test_hutchinson_trace(rng):
    a = rng.normal(size=(4, 4))
    x = rng.normal(size=(3, 4))
    probes = 4000
    est = hutchinson_divergence(lambda t, y: y @ a.T, 0.0, x, probes, np.random.default_rng(1))
    se = np.sqrt(np.sum(a * a) + np.sum(a * a.T)) / np.sqrt(probes)
    assert np.all(np.abs(est - np.trace(a)) < 3 * se)


def test_hutchinson_matches_analytic_bound(small_op, rng):
    n = small_op.dim
    bridge = GTSBridge(D.tsheat_bm(small_op, 0.5, 1.0), GaussianMeasure(np.zeros(n), np.eye(n)),
                       GaussianMeasure(np.ones(n), 0.5 * np.eye(n)))
    pol = optimal_gaussian_policies(bridge)
    grid = terminal_grid(50)
    x0 = rng.normal(size=n)
    exact = likelihood_bound(bridge.dyn, pol, x0, grid, 200, 1, 1)
    est = likelihood_bound(bridge.dyn, pol, x0, grid, 200, 64, 1, use_analytic=False)
    assert est.value == pytest.approx(exact.value, rel=0.05, abs=0.2)


def test_flow_linear_without_policies(small_op, rng):
    dyn = D.tsheat_bm(small_op, 0.5, 1.0)
    init = rng.normal(size=(5, small_op.dim))
    ens = probability_flow(dyn, PolicyPair.zero(), init, TimeGrid.uniform(steps=100), record=[1.0])
    np.testing.assert_allclose(ens.final, init @ D.transition_matrix(dyn, 1.0).T, atol=1e-8)


def test_flow_matches_marginals_and_is_deterministic():
    bridge = synthetic_bridges(bm={"variant": "tsheat_bm", "c": 0.5, "g": 0.01}, ve_cs=())["bm"]
    pol = optimal_gaussian_policies(bridge)
    init = bridge.nu0.sample(5000, 1)
    grid = terminal_grid(200)
    a = probability_flow(bridge.dyn, pol, init, grid, record=[grid.end])
    b = probability_flow(bridge.dyn, pol, init, grid, record=[grid.end])
    np.testing.assert_array_equal(a.states, b.states)
    emp = np.cov(a.final, rowvar=False)
    ref = marginal(bridge, grid.end).measure.cov
    assert np.linalg.norm(emp - ref) / np.linalg.norm(ref) < 0.05
    assert np.linalg.norm(emp - bridge.nu1.cov) / np.linalg.norm(bridge.nu1.cov) < 0.05


def test_stiff_ve_bridge_marginals():
    bridge = synthetic_bridges(ve_cs=(10.0,))["ve_c10"]
    ens = simulate_gtsb(bridge, bridge.nu0.sample(20000, 1), terminal_grid(), 2, record=[0.25, 0.5, 0.75])
    for t in (0.25, 0.5, 0.75):
        ref = marginal(bridge, t).measure.cov
        emp = np.cov(ens.at(t), rowvar=False)
        assert np.linalg.norm(emp - ref) / np.linalg.norm(ref) < 0.05
