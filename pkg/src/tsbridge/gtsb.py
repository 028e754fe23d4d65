"""Gaussian Schrödinger bridges over a linear topological reference SDE.

The bridge between ``nu0`` and ``nu1`` is a Gaussian process
``X_t = Rbar_t X_0 + R_t X_1 + xi_t - R_t xi_1 + Gamma_t^{1/2} Z`` whose
endpoint pair ``(X_0, X_1)`` follows an entropic OT coupling.  Every
reference-process quantity is diagonal in the eigenbasis of ``L``, so the
implementation keeps endpoint covariances in eigen coordinates and only the
dense ``n x n`` products involving ``Sigma_0``, ``Sigma_1`` and ``C`` remain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .dynamics import ReferenceDynamics, bridge_coefficients
from .errors import DataError, EndpointSingularity, SingularMarginal
from .measures import (
    GaussianMeasure,
    check_psd,
    floored_values,
    psd_eigh,
    sqrtm_psd,
    symmetrize,
)

__all__ = [
    "GaussianMeasure",
    "StaticCoupling",
    "GTSBridge",
    "MarginalResult",
    "classical_eot_coupling",
    "solve_static",
    "marginal",
    "interpolant_sample",
    "sde_drift",
    "conditional_given_endpoint",
    "te_ot_objective",
]


def _shrink(x: np.ndarray) -> np.ndarray:
    """``1 / (sqrt(1 + x) + 1)``, i.e. ``(sqrt(1 + x) - 1) / x`` without cancellation."""
    return 1.0 / (np.sqrt(1.0 + np.clip(x, 0.0, None)) + 1.0)


def _matrix_fn(m: np.ndarray, fn) -> np.ndarray:
    lam, u = psd_eigh(m)
    return symmetrize((u * fn(lam)) @ u.T)


@dataclass(frozen=True, eq=False)
class StaticCoupling:
    """Joint Gaussian law of ``(X_0, X_1)`` with cross-covariance ``cross_cov``.

    ``gain0 = Sigma_0^{-1} C`` and ``gain1 = Sigma_1^{-1} C^T`` are filled in
    when they are available without inverting an endpoint covariance.
    ``tilde`` holds the whitened-space intermediates for diagnostics.
    """

    marginal0: GaussianMeasure
    marginal1: GaussianMeasure
    cross_cov: np.ndarray
    tilde: dict | None = None
    gain0: np.ndarray | None = None
    gain1: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.cross_cov, dtype=float)
        n0, n1 = self.marginal0.dim, self.marginal1.dim
        if c.shape != (n0, n1):
            raise DataError(f"cross covariance must be {n0}x{n1}, got {c.shape}")
        object.__setattr__(self, "cross_cov", c)

    @property
    def block_cov(self) -> np.ndarray:
        c = self.cross_cov
        return np.block([[self.marginal0.cov, c], [c.T, self.marginal1.cov]])

    def min_block_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(symmetrize(self.block_cov))[0])

    def sample(self, count: int, seed=None):
        """Draw ``count`` endpoint pairs; returns ``(x0, x1)``."""
        from .gp import sample_gp

        n = self.marginal0.dim
        mean = np.concatenate([self.marginal0.mean, self.marginal1.mean])
        joint = sample_gp(symmetrize(self.block_cov), mean, count, seed)
        return joint[:, :n], joint[:, n:]


def classical_eot_coupling(nu0: GaussianMeasure, nu1: GaussianMeasure, sigma: float) -> StaticCoupling:
    """Entropic OT coupling between Gaussians for the cost ``|x - y|^2 / (2 sigma^2)``.

    ``C = (Sigma_0^{1/2} D Sigma_0^{-1/2} - sigma^2 I) / 2`` with
    ``D = (4 Sigma_0^{1/2} Sigma_1 Sigma_0^{1/2} + sigma^4 I)^{1/2}``.
    Eigenvalues of ``Sigma_0`` below ``1e-12`` are floored (with a warning).
    """
    if not sigma > 0:
        raise DataError("sigma must be positive")
    if nu0.dim != nu1.dim:
        raise DataError("endpoint dimensions differ")
    lam, v = np.linalg.eigh(nu0.cov)
    lam = floored_values(lam, "Sigma_0")
    s0h = symmetrize((v * np.sqrt(lam)) @ v.T)
    s0ih = symmetrize((v / np.sqrt(lam)) @ v.T)
    n = nu0.dim
    d = sqrtm_psd(4.0 * symmetrize(s0h @ nu1.cov @ s0h) + sigma**4 * np.eye(n))
    c = 0.5 * (s0h @ d @ s0ih - sigma**2 * np.eye(n))
    if not np.all(np.isfinite(c)):
        raise SingularMarginal("coupling is not finite; Sigma_0 is too ill-conditioned")
    return StaticCoupling(nu0, nu1, c, tilde={"D": d})


def _stable_cross(s0: np.ndarray, s1: np.ndarray, w: np.ndarray):
    """``C = 2 S0 W S1^{1/2} f(4T) S1^{1/2}`` with ``T = S1^{1/2} W S0 W S1^{1/2}``.

    Returns ``(C, S0^{-1} C)``; no endpoint covariance is inverted.
    """
    s1h = sqrtm_psd(s1)
    t = symmetrize(s1h @ (w[:, None] * s0 * w[None, :]) @ s1h)
    core = s1h @ _matrix_fn(4.0 * t, _shrink) @ s1h
    gain = 2.0 * w[:, None] * core
    return s0 @ gain, gain


def solve_static(dyn: ReferenceDynamics, nu0: GaussianMeasure, nu1: GaussianMeasure) -> StaticCoupling:
    """Static coupling of the bridge.

    In whitened coordinates ``Y0~ = K11^{-1/2}(Psi_1 Y0 + xi_1)``,
    ``Y1~ = K11^{-1/2} Y1`` the reference transition is a unit Brownian step,
    so the unit-variance Gaussian E-OT solution applies there.  Mapping back
    gives ``C = 2 Sigma_0 W Sigma_1^{1/2} f(4T) Sigma_1^{1/2}`` with
    ``W = Psi_1 K11^{-1}``, which needs neither ``Psi_1^{-1}`` nor any inverse
    of an endpoint covariance.
    """
    if nu0.dim != dyn.dim or nu1.dim != dyn.dim:
        raise DataError("endpoint dimension does not match the operator")
    op = dyn.operator
    k11 = dyn.var_spectrum(1.0, 0.0)
    if np.any(k11 <= 0) or not np.all(np.isfinite(k11)):
        from .errors import SingularEndpointCovariance

        raise SingularEndpointCovariance("K_11 is singular")
    k11 = floored_values(k11, "K_11")
    psi1 = dyn.psi(1.0)
    w = psi1 / k11
    s0 = symmetrize(op.to_spectral(nu0.cov))
    s1 = symmetrize(op.to_spectral(nu1.cov))

    c_s, gain0_s = _stable_cross(s0, s1, w)
    ct_s, gain1_s = _stable_cross(s1, s0, w)

    kis = 1.0 / np.sqrt(k11)
    a0 = psi1 * kis
    st0 = symmetrize(a0[:, None] * s0 * a0[None, :])
    st1 = symmetrize(kis[:, None] * s1 * kis[None, :])
    st0h = sqrtm_psd(st0)
    dt = sqrtm_psd(4.0 * symmetrize(st0h @ st1 @ st0h) + np.eye(dyn.dim))
    st1h = sqrtm_psd(st1)
    ct = 2.0 * st0 @ st1h @ _matrix_fn(4.0 * symmetrize(st1h @ st0 @ st1h), _shrink) @ st1h
    xi1 = dyn.bias_spectrum(1.0)
    tilde = {
        "C": op.from_spectral(ct),
        "D": op.from_spectral(dt),
        "Sigma0": op.from_spectral(st0),
        "Sigma1": op.from_spectral(st1),
        "mu0": op.from_spectral(kis * (psi1 * op.to_spectral(nu0.mean) + xi1)),
        "mu1": op.from_spectral(kis * op.to_spectral(nu1.mean)),
    }
    c = op.from_spectral(0.5 * (c_s + ct_s.T))
    return StaticCoupling(nu0, nu1, c, tilde, op.from_spectral(gain0_s), op.from_spectral(gain1_s))


@dataclass(frozen=True)
class MarginalResult:
    measure: GaussianMeasure
    r: np.ndarray
    rbar: np.ndarray
    gamma: np.ndarray


class GTSBridge:
    """Solved bridge between ``nu0`` and ``nu1`` over ``dyn``.

    Pass ``coupling`` to evaluate the bridge under a different endpoint
    coupling (for example the independent one).
    """

    def __init__(self, dyn: ReferenceDynamics, nu0: GaussianMeasure, nu1: GaussianMeasure,
                 coupling: StaticCoupling | None = None):
        self.dyn = dyn
        self.nu0 = nu0
        self.nu1 = nu1
        self.coupling = coupling if coupling is not None else solve_static(dyn, nu0, nu1)
        op = dyn.operator
        self._op = op
        self._s0 = symmetrize(op.to_spectral(nu0.cov))
        self._s1 = symmetrize(op.to_spectral(nu1.cov))
        self._c = op.to_spectral(self.coupling.cross_cov)
        self._m0 = op.to_spectral(nu0.mean)
        self._m1 = op.to_spectral(nu1.mean)
        self._xi1 = dyn.bias_spectrum(1.0)
        self._k11 = dyn.var_spectrum(1.0, 0.0)
        self._psi1 = dyn.psi(1.0)

    @property
    def dim(self) -> int:
        return self.dyn.dim

    @property
    def operator_hash(self) -> str:
        return self._op.source_hash

    # -- eigen-coordinate building blocks ---------------------------------------

    def _spectral_marginal(self, t: float):
        bc = bridge_coefficients(self.dyn, t)
        r, rb = bc.r, bc.rbar
        mean = rb * self._m0 + r * self._m1 + self.dyn.bias_spectrum(t) - r * self._xi1
        rc = rb[:, None] * self._c * r[None, :]
        cov = (rb[:, None] * self._s0 * rb[None, :] + r[:, None] * self._s1 * r[None, :]
               + rc + rc.T + np.diag(bc.gamma))
        return mean, symmetrize(cov), bc

    def _derivatives(self, t: float):
        dyn = self.dyn
        eta = dyn.eta(t)
        upsilon = dyn.dcross_spectrum(t, 1.0)
        rdot = upsilon / self._k11
        rbar_dot = eta * dyn.psi(t) - rdot * self._psi1
        mu_dot = rbar_dot * self._m0 + rdot * self._m1 + dyn.dbias_spectrum(t) - rdot * self._xi1
        return eta, upsilon, rdot, rbar_dot, mu_dot

    def s_matrix(self, t: float, form: str = "spectral") -> np.ndarray:
        """``S_t`` with ``dSigma_t/dt = S_t + S_t^T + g_t^2 I``, in node coordinates.

        ``form`` selects the evaluation route: ``spectral`` (production),
        ``dense`` (``Upsilon = H K_t1 + g^2 Psi_t^{-1} Psi_1`` as dense
        products) or ``dense_derivative`` (``K_tt H^T - K_t1 K11^{-1} d/dt K_1t``).
        """
        t = float(t)
        dyn, op = self.dyn, self._op
        bc = bridge_coefficients(dyn, t)
        r, rb = bc.r, bc.rbar
        eta, upsilon, rdot, rbar_dot, _ = self._derivatives(t)
        p = (r[:, None] * self._s1 + rb[:, None] * self._c) * rdot[None, :]
        q = -rbar_dot[:, None] * (self._c * r[None, :] + self._s0 * rb[None, :])
        pq = op.from_spectral(p - q.T)
        ktt = dyn.cross_spectrum(t, t)
        kt1 = dyn.cross_spectrum(t, 1.0)
        if form == "spectral":
            return pq + op.assemble(eta * ktt - kt1 / self._k11 * upsilon)
        h = op.assemble(eta)
        k_tt, k_t1 = op.assemble(ktt), op.assemble(kt1)
        k11_inv = op.assemble(1.0 / self._k11)
        if form == "dense":
            psi_t_inv = op.assemble(np.exp(-dyn.log_psi(t, 0.0)))
            ups = h @ k_t1 + dyn.g2(t) * psi_t_inv @ op.assemble(self._psi1).T
            return pq + h @ k_tt - k_t1 @ k11_inv @ ups.T
        if form == "dense_derivative":
            d_k1t = op.assemble(upsilon).T
            return pq + k_tt @ h.T - k_t1 @ k11_inv @ d_k1t
        raise DataError(f"unknown form {form!r}")

    def drift_affine(self, t: float):
        """``(A, b)`` with ``sde_drift(t, x) = x @ A.T + b``."""
        t = float(t)
        if not 0.0 < t < 1.0:
            raise EndpointSingularity(f"bridge drift is evaluated on (0, 1), got t={t}")
        op = self._op
        mean, cov, bc = self._spectral_marginal(t)
        eta, upsilon, rdot, rbar_dot, mu_dot = self._derivatives(t)
        p = (bc.r[:, None] * self._s1 + bc.rbar[:, None] * self._c) * rdot[None, :]
        q = -rbar_dot[:, None] * (self._c * bc.r[None, :] + self._s0 * bc.rbar[None, :])
        ktt = self.dyn.cross_spectrum(t, t)
        kt1 = self.dyn.cross_spectrum(t, 1.0)
        s = p - q.T + np.diag(eta * ktt - kt1 / self._k11 * upsilon)
        try:
            fac = cho_factor(cov)
        except LinAlgError:
            raise EndpointSingularity(f"marginal covariance is singular at t={t:g}") from None
        a = cho_solve(fac, s).T
        if not np.all(np.isfinite(a)):
            raise EndpointSingularity(f"bridge drift is not finite at t={t:g}")
        return op.from_spectral(a), op.from_spectral(mu_dot - a @ mean)

    def marginal_derivative(self, t: float):
        """``(d mu_t/dt, d Sigma_t/dt)`` in node coordinates."""
        _, _, _, _, mu_dot = self._derivatives(t)
        s = self.s_matrix(t)
        return self._op.from_spectral(mu_dot), s + s.T + self.dyn.g2(t) * np.eye(self.dim)


def marginal(bridge: GTSBridge, t: float) -> MarginalResult:
    """Gaussian law of ``X_t`` together with ``R_t``, ``Rbar_t`` and ``Gamma_t``."""
    op = bridge._op
    mean, cov, bc = bridge._spectral_marginal(float(t))
    return MarginalResult(GaussianMeasure(op.from_spectral(mean), op.from_spectral(cov)),
                          op.assemble(bc.r), op.assemble(bc.rbar), op.assemble(bc.gamma))


def interpolant_sample(bridge: GTSBridge, x0, x1, t: float, z) -> np.ndarray:
    """Stochastic-interpolant draw; rows of ``x0``, ``x1``, ``z`` are paired."""
    t = float(t)
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if t == 0.0:
        return x0.copy()
    if t == 1.0:
        return x1.copy()
    op, dyn = bridge._op, bridge.dyn
    bc = bridge_coefficients(dyn, t)
    out = (bc.rbar * op.to_spectral(x0) + bc.r * op.to_spectral(x1)
           + dyn.bias_spectrum(t) - bc.r * bridge._xi1
           + np.sqrt(bc.gamma) * op.to_spectral(np.asarray(z, dtype=float)))
    return op.from_spectral(out)


def sde_drift(bridge: GTSBridge, t: float, x) -> np.ndarray:
    """Markovian drift whose marginals are the bridge marginals."""
    a, b = bridge.drift_affine(t)
    return np.asarray(x, dtype=float) @ a.T + b


def _gain(bridge: GTSBridge, which: int) -> np.ndarray:
    cp = bridge.coupling
    cached = cp.gain0 if which == 0 else cp.gain1
    if cached is not None:
        return cached
    cov = (bridge.nu0 if which == 0 else bridge.nu1).cov
    rhs = cp.cross_cov if which == 0 else cp.cross_cov.T
    try:
        return cho_solve(cho_factor(cov), rhs)
    except LinAlgError:
        raise SingularMarginal("conditioning endpoint covariance is singular") from None


def conditional_given_endpoint(bridge: GTSBridge, t: float, x0=None, x1=None) -> GaussianMeasure:
    """Law of ``X_t`` given ``X_0 = x0`` or given ``X_1 = x1`` (exactly one)."""
    if (x0 is None) == (x1 is None):
        raise DataError("give exactly one of x0 and x1")
    t = float(t)
    op, dyn = bridge._op, bridge.dyn
    bc = bridge_coefficients(dyn, t)
    r, rb = bc.r, bc.rbar
    drift_part = dyn.bias_spectrum(t) - r * bridge._xi1
    if x0 is not None:
        g = op.to_spectral(_gain(bridge, 0))  # Sigma_0^{-1} C
        dev = op.to_spectral(np.asarray(x0, dtype=float)) - bridge._m0
        m1 = bridge._m1 + dev @ g
        res = bridge._s1 - bridge._c.T @ g
        mean = rb * op.to_spectral(np.asarray(x0, dtype=float)) + r * m1 + drift_part
        cov = r[:, None] * res * r[None, :]
    else:
        g = op.to_spectral(_gain(bridge, 1))  # Sigma_1^{-1} C^T
        dev = op.to_spectral(np.asarray(x1, dtype=float)) - bridge._m1
        m0 = bridge._m0 + dev @ g
        res = bridge._s0 - bridge._c @ g
        mean = rb * m0 + r * op.to_spectral(np.asarray(x1, dtype=float)) + drift_part
        cov = rb[:, None] * res * rb[None, :]
    cov = symmetrize(cov) + np.diag(bc.gamma)
    lam, u = np.linalg.eigh(cov)
    cov = (u * np.clip(lam, 0.0, None)) @ u.T
    return GaussianMeasure(op.from_spectral(mean), op.from_spectral(symmetrize(cov)))


def te_ot_objective(bridge: GTSBridge, coupling: StaticCoupling | None = None) -> float:
    """``E[|Y1 - Psi_1 Y0 - xi_1|^2_{K11^{-1}} / 2] - H(P01)`` for a Gaussian coupling.

    Joint-covariance eigenvalues below ``1e-12`` are floored before the
    log-determinant.
    """
    cp = coupling if coupling is not None else bridge.coupling
    op = bridge._op
    psi, k = bridge._psi1, bridge._k11
    s0 = op.to_spectral(cp.marginal0.cov)
    s1 = op.to_spectral(cp.marginal1.cov)
    c = op.to_spectral(cp.cross_cov)
    d = op.to_spectral(cp.marginal1.mean) - psi * op.to_spectral(cp.marginal0.mean) - bridge._xi1
    second = np.diag(s1) - 2 * psi * np.diag(c) + psi**2 * np.diag(s0)
    cost = 0.5 * float(np.sum((second + d * d) / k))
    joint = check_psd(symmetrize(cp.block_cov), "coupling", tol=1e-8)
    lam = floored_values(np.linalg.eigvalsh(joint), "coupling covariance")
    entropy = 0.5 * float(np.sum(np.log(2 * np.pi * np.e * lam)))
    return cost - entropy
