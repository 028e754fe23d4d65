import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsbridge import dynamics as D
from tsbridge.checks import random_spd
from tsbridge.errors import DataError, EndpointSingularity
from tsbridge.experiments import synthetic_bridges
from tsbridge.gtsb import (
    GTSBridge,
    StaticCoupling,
    classical_eot_coupling,
    conditional_given_endpoint,
    interpolant_sample,
    marginal,
    sde_drift,
    solve_static,
    te_ot_objective,
)
from tsbridge.measures import FlooredInverseWarning, GaussianMeasure
from tsbridge.sim import TimeGrid, simulate_gtsb
from tsbridge.spectral import eigendecompose


def std(n, mean=0.0, scale=1.0):
    return GaussianMeasure(np.full(n, float(mean)), scale * np.eye(n))


def line_op(n):
    return eigendecompose(np.diag(np.linspace(0.0, 2.0, n)))


def brownian(op, g=1.0):
    return D.general_linear(op, [0.0], g)


@pytest.fixture
def small_bridge(small_op, rng):
    n = small_op.dim
    nu0 = GaussianMeasure(rng.normal(size=n), random_spd(rng, n))
    nu1 = GaussianMeasure(rng.normal(size=n) + 1, random_spd(rng, n))
    return GTSBridge(D.tsheat_ve(small_op, 1.0, 0.1, 1.0), nu0, nu1)


# -- static coupling -------------------------------------------------------------

def test_classical_standard_gaussians():
    cp = classical_eot_coupling(std(3), std(3), 1.0)
    np.testing.assert_allclose(cp.cross_cov, 0.5 * (np.sqrt(5) - 1) * np.eye(3), atol=1e-14)
    np.testing.assert_allclose(cp.tilde["D"], np.sqrt(5) * np.eye(3), atol=1e-14)


def test_classical_degenerate_target():
    cp = classical_eot_coupling(std(2), GaussianMeasure(np.zeros(2), np.zeros((2, 2))), 1.0)
    np.testing.assert_allclose(cp.cross_cov, 0.0, atol=1e-14)


def test_classical_monge_limit():
    cp = classical_eot_coupling(std(1), std(1, scale=4.0), 1e-6)
    assert cp.cross_cov[0, 0] == pytest.approx(2.0, abs=1e-9)


def test_classical_floors_singular_source():
    with pytest.warns(FlooredInverseWarning):
        classical_eot_coupling(GaussianMeasure(np.zeros(2), np.zeros((2, 2))), std(2), 1.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 10), st.floats(0.2, 3.0))
def test_brownian_solve_matches_classical(seed, n, g):
    rng = np.random.default_rng(seed)
    nu0 = GaussianMeasure(rng.normal(size=n), random_spd(rng, n))
    nu1 = GaussianMeasure(rng.normal(size=n), random_spd(rng, n))
    got = solve_static(brownian(line_op(n), g), nu0, nu1).cross_cov
    ref = classical_eot_coupling(nu0, nu1, g).cross_cov
    assert np.abs(got - ref).max() < 1e-8


def test_point_mass_endpoints_give_zero_cross():
    op = line_op(3)
    pm = GaussianMeasure(np.ones(3), 1e-14 * np.eye(3))
    cp = solve_static(D.tsheat_bm(op, 0.5, 1.0), pm, pm)
    assert np.abs(cp.cross_cov).max() < 1e-10


def test_synthetic_coupling_is_block_psd():
    bridge = synthetic_bridges(ve_cs=())["bm"]
    cp = bridge.coupling
    assert cp.min_block_eigenvalue() > -1e-10
    # exp(-20 L) has eigenvalues far below the entropy floor
    with pytest.warns(FlooredInverseWarning):
        assert np.isfinite(te_ot_objective(bridge))


def test_gains_match_solves(small_bridge):
    cp = small_bridge.coupling
    np.testing.assert_allclose(small_bridge.nu0.cov @ cp.gain0, cp.cross_cov, atol=1e-10)
    np.testing.assert_allclose(small_bridge.nu1.cov @ cp.gain1, cp.cross_cov.T, atol=1e-10)


def test_whitened_coupling_is_unit_eot(small_bridge):
    tl = small_bridge.coupling.tilde
    ref = classical_eot_coupling(GaussianMeasure(tl["mu0"], tl["Sigma0"]),
                                 GaussianMeasure(tl["mu1"], tl["Sigma1"]), 1.0)
    np.testing.assert_allclose(tl["C"], ref.cross_cov, atol=1e-9)


def test_static_coupling_shape_check():
    with pytest.raises(DataError):
        StaticCoupling(std(2), std(2), np.zeros((2, 3)))


# -- marginals -------------------------------------------------------------------

def test_marginal_boundaries(small_bridge):
    m0, m1 = marginal(small_bridge, 0.0), marginal(small_bridge, 1.0)
    np.testing.assert_allclose(m0.measure.cov, small_bridge.nu0.cov, atol=1e-12)
    np.testing.assert_allclose(m0.measure.mean, small_bridge.nu0.mean, atol=1e-12)
    np.testing.assert_allclose(m1.measure.cov, small_bridge.nu1.cov, atol=1e-12)
    np.testing.assert_allclose(m1.measure.mean, small_bridge.nu1.mean, atol=1e-12)
    np.testing.assert_array_equal(m0.gamma, 0.0)
    np.testing.assert_allclose(m1.gamma, 0.0, atol=1e-15)


def test_brownian_scalar_marginal_is_symmetric():
    bridge = GTSBridge(brownian(line_op(1)), std(1), std(1))
    for t in (0.1, 0.25, 0.4):
        a = marginal(bridge, t).measure.cov[0, 0]
        b = marginal(bridge, 1 - t).measure.cov[0, 0]
        assert a == pytest.approx(b, rel=1e-12)


def test_marginal_matches_dense_block_formula(small_bridge):
    dyn, t = small_bridge.dyn, 0.35
    k_t1 = D.cross_cov(dyn, t, 1.0)
    k_tt = D.cross_cov(dyn, t, t)
    k11_inv = np.linalg.inv(D.cross_cov(dyn, 1.0, 1.0))
    r = k_t1 @ k11_inv
    rbar = D.transition_matrix(dyn, t) - r @ D.transition_matrix(dyn, 1.0)
    c = small_bridge.coupling.cross_cov
    s0, s1 = small_bridge.nu0.cov, small_bridge.nu1.cov
    cov = rbar @ s0 @ rbar.T + r @ s1 @ r.T + rbar @ c @ r.T + r @ c.T @ rbar.T + k_tt - r @ k_t1.T
    res = marginal(small_bridge, t)
    np.testing.assert_allclose(res.measure.cov, cov, atol=1e-9)
    np.testing.assert_allclose(res.r, r, atol=1e-10)
    np.testing.assert_allclose(res.rbar, rbar, atol=1e-10)


def test_marginal_derivative_by_finite_difference(small_bridge):
    t, h = 0.4, 1e-5
    mu_dot, cov_dot = small_bridge.marginal_derivative(t)
    plus, minus = marginal(small_bridge, t + h).measure, marginal(small_bridge, t - h).measure
    np.testing.assert_allclose(mu_dot, (plus.mean - minus.mean) / (2 * h), atol=1e-6)
    np.testing.assert_allclose(cov_dot, (plus.cov - minus.cov) / (2 * h), atol=1e-6)


@pytest.mark.parametrize("form", ["dense", "dense_derivative"])
def test_s_matrix_routes_agree(small_bridge, form):
    for t in (0.2, 0.5, 0.8):
        np.testing.assert_allclose(small_bridge.s_matrix(t, form), small_bridge.s_matrix(t), atol=1e-8)


# -- samplers and drift ----------------------------------------------------------

def test_interpolant_boundaries(small_bridge, rng):
    x0, x1, z = rng.normal(size=(3, 4, small_bridge.dim))
    np.testing.assert_array_equal(interpolant_sample(small_bridge, x0, x1, 0.0, z), x0)
    np.testing.assert_array_equal(interpolant_sample(small_bridge, x0, x1, 1.0, z), x1)


def test_interpolant_ensemble_moments(small_bridge):
    x0, x1 = small_bridge.coupling.sample(20000, 5)
    z = np.random.default_rng(6).standard_normal(x0.shape)
    xt = interpolant_sample(small_bridge, x0, x1, 0.5, z)
    ref = marginal(small_bridge, 0.5).measure
    se = np.sqrt(np.diag(ref.cov) / len(xt))
    assert np.all(np.abs(xt.mean(axis=0) - ref.mean) < 3.5 * se)
    cov = np.cov(xt, rowvar=False)
    assert np.linalg.norm(cov - ref.cov) / np.linalg.norm(ref.cov) < 0.05


def test_drift_at_mean_is_mean_velocity(small_bridge):
    t = 0.3
    mu = marginal(small_bridge, t).measure.mean
    mu_dot, _ = small_bridge.marginal_derivative(t)
    np.testing.assert_allclose(sde_drift(small_bridge, t, mu), mu_dot, atol=1e-10)


def test_drift_reproduces_covariance_derivative(small_bridge):
    t = 0.6
    a, _ = small_bridge.drift_affine(t)
    cov = marginal(small_bridge, t).measure.cov
    _, cov_dot = small_bridge.marginal_derivative(t)
    g2 = float(small_bridge.dyn.g2(t))
    np.testing.assert_allclose(a @ cov + cov @ a.T + g2 * np.eye(small_bridge.dim), cov_dot, atol=1e-8)


def test_drift_rejects_endpoints(small_bridge):
    for t in (0.0, 1.0):
        with pytest.raises(EndpointSingularity):
            small_bridge.drift_affine(t)


def test_brownian_stationary_bridge_by_simulation():
    n = 3
    bridge = GTSBridge(brownian(line_op(n)), std(n), std(n))
    x0 = bridge.nu0.sample(20000, 1)
    grid = TimeGrid(np.append(np.linspace(0, 1, 501)[:-1], 1 - 1e-3))
    ens = simulate_gtsb(bridge, x0, grid, 2, record=[grid.end])
    cov = np.cov(ens.final, rowvar=False)
    assert np.linalg.norm(cov - np.eye(n)) / np.sqrt(n) < 0.05


def test_deterministic_endpoints_follow_mean_curve():
    op = line_op(2)
    eps = 1e-10 * np.eye(2)
    nu0 = GaussianMeasure(np.array([0.0, 1.0]), eps)
    nu1 = GaussianMeasure(np.array([2.0, -1.0]), eps)
    bridge = GTSBridge(D.tsheat_bm(op, 0.5, 0.05), nu0, nu1)
    grid = TimeGrid(np.append(np.linspace(0, 1, 401)[:-1], 1 - 1e-3))
    ens = simulate_gtsb(bridge, nu0.sample(4000, 1), grid, 3, record=[0.25, 0.5, 0.75])
    for t in (0.25, 0.5, 0.75):
        np.testing.assert_allclose(ens.at(t).mean(axis=0), marginal(bridge, t).measure.mean, atol=5e-3)


# -- conditionals and objective --------------------------------------------------

def test_conditional_at_start_is_point_mass(small_bridge, rng):
    x0 = rng.normal(size=small_bridge.dim)
    law = conditional_given_endpoint(small_bridge, 0.0, x0=x0)
    np.testing.assert_allclose(law.mean, x0, atol=1e-12)
    np.testing.assert_allclose(law.cov, 0.0, atol=1e-12)
    with pytest.raises(DataError):
        conditional_given_endpoint(small_bridge, 0.5)


def test_conditional_total_variance(small_bridge, rng):
    """Given ``x0``: bridge-conditional mean/cov averaged over ``X1 | X0 = x0``."""
    t = 0.45
    x0 = rng.normal(size=small_bridge.dim)
    s0, s1 = small_bridge.nu0.cov, small_bridge.nu1.cov
    c = small_bridge.coupling.cross_cov
    m1 = small_bridge.nu1.mean + c.T @ np.linalg.solve(s0, x0 - small_bridge.nu0.mean)
    v1 = s1 - c.T @ np.linalg.solve(s0, c)
    res = marginal(small_bridge, t)
    ref_law = D.reference_bridge_conditional(small_bridge.dyn, t, x0, m1)
    law = conditional_given_endpoint(small_bridge, t, x0=x0)
    np.testing.assert_allclose(law.mean, ref_law.mean, atol=1e-9)
    np.testing.assert_allclose(law.cov, ref_law.cov + res.r @ v1 @ res.r.T, atol=1e-9)


def test_conditional_given_final_state(small_bridge, rng):
    x1 = rng.normal(size=small_bridge.dim)
    law = conditional_given_endpoint(small_bridge, 1.0, x1=x1)
    np.testing.assert_allclose(law.mean, x1, atol=1e-10)


def test_independent_coupling_conditional_by_simulation():
    op = line_op(2)
    nu0, nu1 = std(2), GaussianMeasure(np.array([1.0, -1.0]), 0.5 * np.eye(2))
    indep = StaticCoupling(nu0, nu1, np.zeros((2, 2)))
    bridge = GTSBridge(brownian(op), nu0, nu1, coupling=indep)
    x0 = np.array([0.3, -0.2])
    rng = np.random.default_rng(4)
    x1 = nu1.sample(20000, 5)
    xt = interpolant_sample(bridge, np.broadcast_to(x0, x1.shape), x1, 0.5, rng.standard_normal(x1.shape))
    law = conditional_given_endpoint(bridge, 0.5, x0=x0)
    se = np.sqrt(np.diag(law.cov) / len(xt))
    assert np.all(np.abs(xt.mean(axis=0) - law.mean) < 3.5 * se)
    np.testing.assert_allclose(np.cov(xt, rowvar=False), law.cov, atol=0.02)


def test_objective_scalar_closed_form():
    g = 0.7
    nu0 = GaussianMeasure(np.array([0.2]), np.array([[1.3]]))
    nu1 = GaussianMeasure(np.array([-0.4]), np.array([[0.6]]))
    bridge = GTSBridge(brownian(line_op(1), g), nu0, nu1)
    c = bridge.coupling.cross_cov[0, 0]
    s0, s1 = 1.3, 0.6
    cost = (s0 + s1 - 2 * c + 0.36) / (2 * g * g)
    entropy = 0.5 * np.log((2 * np.pi * np.e) ** 2 * (s0 * s1 - c * c))
    assert te_ot_objective(bridge) == pytest.approx(cost - entropy, abs=1e-10)


def test_solved_coupling_beats_independent(rng):
    op = line_op(2)
    nu0 = GaussianMeasure(rng.normal(size=2), random_spd(rng, 2))
    nu1 = GaussianMeasure(rng.normal(size=2), random_spd(rng, 2))
    bridge = GTSBridge(D.tsheat_bm(op, 0.5, 0.8), nu0, nu1)
    indep = StaticCoupling(nu0, nu1, np.zeros((2, 2)))
    assert te_ot_objective(bridge) <= te_ot_objective(bridge, indep)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.5, 0.5))
def test_solved_coupling_is_stationary(seed, step):
    """Perturbing the solved cross-covariance never lowers the objective."""
    rng = np.random.default_rng(seed)
    op = line_op(2)
    nu0 = GaussianMeasure(np.zeros(2), random_spd(rng, 2, 0.5))
    nu1 = GaussianMeasure(np.zeros(2), random_spd(rng, 2, 0.5))
    bridge = GTSBridge(D.tsheat_bm(op, 0.5, 1.0), nu0, nu1)
    cp = bridge.coupling
    d = rng.normal(size=(2, 2))
    moved = StaticCoupling(nu0, nu1, cp.cross_cov + 0.05 * step * d)
    if moved.min_block_eigenvalue() <= 0:
        return
    assert te_ot_objective(bridge) <= te_ot_objective(bridge, moved) + 1e-12


def test_equal_endpoints_large_noise_objective_finite():
    bridge = GTSBridge(brownian(line_op(2), 10.0), std(2), std(2))
    assert np.isfinite(te_ot_objective(bridge))
