import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.linalg import expm

from tsbridge import dynamics as D
from tsbridge.errors import DataError, EndpointSingularity
from tsbridge.experiments import SIGMA0_SPEC, synthetic_operator
from tsbridge.gp import gp_covariance
from tsbridge.measures import GaussianMeasure
from tsbridge.sim import TimeGrid, euler_maruyama
from tsbridge.spectral import eigendecompose


def scalar_kernel(g2, c, lam, t1, t2):
    """Reference cross-covariance on one eigenvalue by adaptive quadrature."""
    m = min(t1, t2)
    val, _ = quad(lambda tau: g2(tau) * np.exp(-c * lam * (t1 + t2 - 2 * tau)), 0.0, m,
                  epsabs=0, epsrel=1e-12, limit=200)
    return val


@pytest.fixture(scope="module")
def graph_op():
    return synthetic_operator()


def test_heat_drift_on_eigenvector(small_op):
    dyn = D.tsheat_bm(small_op, 1.0, 1.0)
    for i in range(small_op.dim):
        u = small_op.eigenvectors[:, i]
        np.testing.assert_allclose(D.drift(dyn, 0.3, u), -small_op.eigenvalues[i] * u, atol=1e-12)


def test_vp_drift_at_zero(small_op, rng):
    dyn = D.tsheat_vp(small_op, 0.0, 0.1, 20.0)
    y = rng.normal(size=small_op.dim)
    np.testing.assert_allclose(D.drift(dyn, 0.0, y), -0.05 * y, atol=1e-14)


def test_pure_bias_drift(small_op, rng):
    dyn = D.general_linear(small_op, [0.0], 1.0, np.ones(small_op.dim))
    np.testing.assert_allclose(D.drift(dyn, 0.7, rng.normal(size=small_op.dim)), np.ones(small_op.dim))


def test_drift_methods_agree(small_op, rng):
    dyn = D.general_linear(small_op, [(0.2, -0.1), -0.4, 0.05], 1.0)
    y = rng.normal(size=(4, small_op.dim))
    np.testing.assert_allclose(D.drift(dyn, 0.6, y), D.drift(dyn, 0.6, y, method="polynomial"), atol=1e-12)


def test_diffusion_coefficients(small_op):
    assert D.diffusion_coeff(D.tsheat_bm(small_op, 0.5, 0.01), 0.37) == pytest.approx(0.01)
    ve = D.tsheat_ve(small_op, 1.0, 0.01, 1.0)
    assert D.diffusion_coeff(ve, 0.0) == pytest.approx(0.01 * np.sqrt(2 * np.log(100.0)))
    vp = D.tsheat_vp(small_op, 0.0, 0.1, 20.0)
    assert D.diffusion_coeff(vp, 1.0) == pytest.approx(np.sqrt(20.0))


def test_invalid_parameters(small_op):
    with pytest.raises(DataError):
        D.tsheat_bm(small_op, 0.5, 0.0)
    with pytest.raises(DataError):
        D.tsheat_ve(small_op, 1.0, 1.0, 0.5)
    with pytest.raises(DataError):
        D.general_linear(small_op, [0.0], lambda t: 0.0)
    with pytest.raises(DataError):
        D.from_config({"variant": "nope"}, small_op)


def test_cond_mean(small_op, rng):
    y = rng.normal(size=small_op.dim)
    dyn = D.tsheat_bm(small_op, 0.5, 1.0)
    np.testing.assert_allclose(D.cond_mean(dyn, 0.4, 0.4, y), y)
    u = small_op.eigenvectors[:, 3]
    np.testing.assert_allclose(D.cond_mean(dyn, 1.0, 0.0, u), np.exp(-0.5 * small_op.eigenvalues[3]) * u,
                               atol=1e-12)
    a = rng.normal(size=small_op.dim)
    integ = D.general_linear(small_op, [0.0], 1.0, a)
    np.testing.assert_allclose(D.cond_mean(integ, 0.6, 0.0, y), y + 0.6 * a, atol=1e-12)


def test_cross_cov_vanishes_at_zero(small_op):
    for dyn in (D.tsheat_bm(small_op, 0.5, 1.0), D.tsheat_ve(small_op, 2.0, 0.1, 1.0)):
        np.testing.assert_array_equal(D.cross_cov(dyn, 0.0, 0.7), 0.0)
        np.testing.assert_array_equal(D.cross_cov(dyn, 0.5, 0.0), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 10.0), st.floats(1e-3, 5.0), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_bm_scalar_formula(c, g, t1, t2):
    op = eigendecompose(np.diag([0.0, 0.3, 1.7, 4.0]))
    got = np.diag(D.cross_cov(D.tsheat_bm(op, c, g), t1, t2))
    for lam, val in zip(op.eigenvalues, got):
        assert val == pytest.approx(scalar_kernel(lambda _: g * g, c, lam, t1, t2), rel=1e-9, abs=1e-300)


@pytest.mark.parametrize("c", [0.01, 1.0, 10.0])
def test_ve_closed_form_against_quadrature(graph_op, c):
    dyn = D.tsheat_ve(graph_op, c, 0.01, 1.0)
    got = graph_op.to_spectral(D.cross_cov(dyn, 1.0, 1.0)).diagonal()
    ref = [scalar_kernel(lambda s: float(dyn.g(s)) ** 2, c, lam, 1.0, 1.0) for lam in graph_op.eigenvalues]
    np.testing.assert_allclose(got, ref, rtol=1e-6)


def test_vp_quadrature_against_scalar(small_op):
    dyn = D.tsheat_vp(small_op, 0.5, 0.1, 20.0)
    lam = small_op.eigenvalues
    got = dyn.var_spectrum(0.8, 0.2)

    def ref(l):
        logpsi = lambda a, b: -(0.05 * (a - b) + 0.25 * 19.9 * (a * a - b * b)) - 0.5 * l * (a - b)  # noqa: E731
        val, _ = quad(lambda tau: float(dyn.g2(tau)) * np.exp(2 * logpsi(0.8, tau)), 0.2, 0.8, epsrel=1e-12)
        return val

    np.testing.assert_allclose(got, [ref(v) for v in lam], rtol=1e-8)


def test_transition_cov(small_op, graph_op):
    dyn = D.tsheat_bm(small_op, 0.5, 1.0)
    np.testing.assert_array_equal(D.transition_cov(dyn, 0.3, 0.3), 0.0)
    g_dyn = D.tsheat_bm(graph_op, 0.5, 0.01)
    np.testing.assert_allclose(D.transition_cov(g_dyn, 1.0, 0.0), D.cross_cov(g_dyn, 1.0, 1.0), atol=1e-10)


def test_brownian_limit():
    op = eigendecompose(np.eye(3) * 1e-9)
    dyn = D.tsheat_bm(op, 1.0, 2.0)
    np.testing.assert_allclose(D.transition_cov(dyn, 0.9, 0.2), 4.0 * 0.7 * np.eye(3), rtol=1e-8)


def test_transition_kernel_matches_expm(small_op, rng):
    dyn = D.tsheat_bm(small_op, 0.7, 1.0)
    stats = D.transition_kernel(dyn, 0.9, 0.3)
    np.testing.assert_allclose(stats.mean_map, expm(-0.7 * 0.6 * small_op.matrix), atol=1e-12)
    np.testing.assert_allclose(stats.bias, 0.0)


def test_marginal_from_gaussian_init(small_op):
    dyn = D.general_linear(small_op, [0.0], 1.5)
    nu0 = GaussianMeasure(np.ones(small_op.dim), np.zeros((small_op.dim, small_op.dim)))
    assert D.marginal_from_gaussian_init(dyn, nu0, 0.0) is nu0
    m = D.marginal_from_gaussian_init(dyn, nu0, 0.4)
    np.testing.assert_allclose(m.cov, 2.25 * 0.4 * np.eye(small_op.dim), atol=1e-12)
    np.testing.assert_allclose(m.mean, 1.0)


def test_marginal_matches_euler_maruyama(graph_op):
    dyn = D.tsheat_bm(graph_op, 0.5, 0.01)
    nu0 = GaussianMeasure(np.zeros(30), gp_covariance(SIGMA0_SPEC, graph_op))
    x0 = nu0.sample(20000, 1)
    ens = euler_maruyama(lambda t, x: D.drift(dyn, t, x), dyn.g, x0, TimeGrid.uniform(steps=500), 2,
                         record=[1.0])
    emp = np.cov(ens.final, rowvar=False)
    ref = D.marginal_from_gaussian_init(dyn, nu0, 1.0).cov
    assert np.linalg.norm(emp - ref) / np.linalg.norm(ref) < 0.05


def test_score_at_mean_and_scalar_case(small_op, rng):
    dyn = D.tsheat_bm(small_op, 0.5, 1.0)
    nu0 = GaussianMeasure(rng.normal(size=small_op.dim), np.eye(small_op.dim))
    m = D.marginal_from_gaussian_init(dyn, nu0, 0.6)
    np.testing.assert_allclose(D.analytic_score(dyn, nu0, 0.6, m.mean), 0.0, atol=1e-12)
    u = small_op.eigenvectors[:, 2]
    var = float(u @ m.cov @ u)
    x = m.mean + 0.8 * u
    np.testing.assert_allclose(D.analytic_score(dyn, nu0, 0.6, x), -0.8 / var * u, atol=1e-10)


def test_score_finite_difference(small_op, rng):
    dyn = D.tsheat_ve(small_op, 1.0, 0.1, 1.0)
    a = rng.normal(size=(small_op.dim, small_op.dim))
    nu0 = GaussianMeasure(rng.normal(size=small_op.dim), a @ a.T / 6 + 0.1 * np.eye(small_op.dim))
    m = D.marginal_from_gaussian_init(dyn, nu0, 0.5)
    x = rng.normal(size=small_op.dim)
    h = 1e-5
    fd = np.array([(m.logpdf(x + h * e) - m.logpdf(x - h * e)) / (2 * h) for e in np.eye(small_op.dim)])
    np.testing.assert_allclose(D.analytic_score(dyn, nu0, 0.5, x), fd, rtol=1e-5, atol=1e-8)


def test_doob_correction_vanishes_on_target(small_op, rng):
    dyn = D.tsheat_bm(small_op, 0.5, 1.0)
    x = rng.normal(size=small_op.dim)
    x1 = D.cond_mean(dyn, 1.0, 0.3, x)
    np.testing.assert_allclose(D.doob_h_drift(dyn, 0.3, x, x1), D.drift(dyn, 0.3, x), atol=1e-12)


def test_doob_brownian_bridge(small_op, rng):
    dyn = D.general_linear(small_op, [0.0], 1.0)
    x, x1 = rng.normal(size=(2, small_op.dim))
    np.testing.assert_allclose(D.doob_h_drift(dyn, 0.4, x, x1), (x1 - x) / 0.6, atol=1e-12)
    with pytest.raises(EndpointSingularity):
        D.doob_h_drift(dyn, 1.0, x, x1)


def test_reference_bridge_conditional(small_op, rng):
    y0, y1 = rng.normal(size=(2, small_op.dim))
    bm = D.general_linear(small_op, [0.0], 1.0)
    law = D.reference_bridge_conditional(bm, 0.3, y0, y1)
    np.testing.assert_allclose(law.mean, 0.7 * y0 + 0.3 * y1, atol=1e-12)
    np.testing.assert_allclose(law.cov, 0.21 * np.eye(small_op.dim), atol=1e-12)
    start = D.reference_bridge_conditional(D.tsheat_bm(small_op, 0.5, 1.0), 0.0, y0, y1)
    np.testing.assert_allclose(start.mean, y0, atol=1e-14)
    np.testing.assert_array_equal(start.cov, 0.0)


def test_bridge_conditional_from_kernel_blocks(graph_op, rng):
    dyn = D.tsheat_bm(graph_op, 0.5, 0.01)
    y0, y1 = rng.normal(size=(2, 30))
    t = 0.5
    psi_t = D.transition_matrix(dyn, t)
    psi_1 = D.transition_matrix(dyn, 1.0)
    k_tt, k_t1, k_11 = (D.cross_cov(dyn, *p) for p in [(t, t), (t, 1.0), (1.0, 1.0)])
    gain = np.linalg.solve(k_11, k_t1.T).T
    mean = psi_t @ y0 + gain @ (y1 - psi_1 @ y0)
    cov = k_tt - gain @ k_t1.T
    law = D.reference_bridge_conditional(dyn, t, y0, y1)
    np.testing.assert_allclose(law.mean, mean, atol=1e-8)
    np.testing.assert_allclose(law.cov, cov, atol=1e-10)
    assert np.linalg.eigvalsh(law.cov).min() >= -1e-14


def test_heterogeneous_matches_combined_heat(triangle):
    from tsbridge.topology import laplacian

    ld = laplacian(triangle, kind="hodge_down")
    lu = laplacian(triangle, kind="hodge_up")
    dyn = D.heterogeneous(ld, lu, 0.5, 2.0, 1.0)
    np.testing.assert_allclose(D.transition_matrix(dyn, 1.0), expm(-(0.5 * ld + 2.0 * lu)), atol=1e-12)
    with pytest.raises(DataError):
        D.heterogeneous(ld, ld, 1.0, 1.0, 1.0)


def test_general_quadrature_matches_closed_form(small_op):
    dyn = D.tsheat_ve(small_op, 3.0, 0.1, 1.0)
    np.testing.assert_allclose(dyn.var_spectrum(0.9, 0.1, method="quadrature"),
                               dyn.var_spectrum(0.9, 0.1, method="closed"), rtol=1e-9)
