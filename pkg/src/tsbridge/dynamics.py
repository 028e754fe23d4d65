"""Linear reference SDEs ``dY = (H_t(L) Y + alpha_t) dt + g_t dW`` on a topology.

All kernels are evaluated per eigenvalue of ``L`` and reassembled in the
original basis.  The brownian-motion and variance-exploding variants use
closed forms written with ``expm1`` so that they stay finite for ``lambda = 0``
and for large ``c * lambda``; everything else goes through adaptive
Gauss-Legendre quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError, EndpointSingularity, SingularEndpointCovariance
from .measures import GaussianMeasure, floored_values, symmetrize
from .spectral import (
    CoefficientSchedule,
    SpectralOperator,
    adaptive_gauss_legendre,
    eigendecompose,
    heat_schedule,
)

QUAD_RTOL = 1e-10
CLOSED_FORM_VARIANTS = ("tsheat_bm", "tsheat_ve", "heterogeneous")


def _phi1(x: np.ndarray) -> np.ndarray:
    """``(1 - exp(-x)) / x`` with the removable singularity filled in."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - 0.5 * x, -np.expm1(-safe) / safe)


def _as_operator(op) -> SpectralOperator:
    return op if isinstance(op, SpectralOperator) else eigendecompose(op)


def _check_psd_operator(op: SpectralOperator):
    if op.eigenvalues[0] < -1e-10 * max(1.0, abs(op.eigenvalues[-1])):
        raise DataError("heat dynamics need a positive semi-definite operator")


def _vectorize(fn) -> Callable[[np.ndarray], np.ndarray]:
    def wrapped(t):
        t = np.asarray(t, dtype=float)
        out = np.asarray(fn(t), dtype=float)
        if out.shape != t.shape:
            out = np.vectorize(lambda s: float(fn(s)), otypes=[float])(t)
        return out

    return wrapped


@dataclass(frozen=True, eq=False)
class ReferenceDynamics:
    """Drift polynomial schedule, optional bias and scalar diffusion schedule.

    Build instances with :func:`tsheat_bm`, :func:`tsheat_ve`,
    :func:`tsheat_vp`, :func:`general_linear` or :func:`heterogeneous`.
    """

    variant: str
    operator: SpectralOperator
    schedule: CoefficientSchedule
    diffusion: Callable[[np.ndarray], np.ndarray]
    bias: Callable[[float], np.ndarray] | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = np.linspace(0.0, 1.0, 101)
        g = np.asarray(self.diffusion(grid), dtype=float)
        if g.shape != grid.shape or not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise DataError("diffusion coefficient must be positive and finite on [0, 1]")

    # -- scalar schedules ------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.operator.dim

    @property
    def eigs(self) -> np.ndarray:
        return self.operator.clamped_eigenvalues

    @property
    def has_closed_form(self) -> bool:
        return self.variant in CLOSED_FORM_VARIANTS

    @property
    def fingerprint(self) -> str:
        items = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.variant}[{items}]@{self.operator.source_hash[:12]}"

    def g(self, t) -> float:
        return float(self.diffusion(np.asarray(float(t))))

    def g2(self, t) -> np.ndarray:
        return np.asarray(self.diffusion(np.asarray(t, dtype=float)), dtype=float) ** 2

    def eta(self, t: float) -> np.ndarray:
        """Eigenvalues of ``H_t``."""
        return self.schedule.drift_spectrum(self.eigs, float(t))

    def log_psi(self, t, s) -> np.ndarray:
        return self.schedule.log_transition(self.eigs, t, s)

    def psi(self, t: float, s: float = 0.0) -> np.ndarray:
        """Eigenvalues of ``Psi_{ts}``."""
        return np.exp(self.log_psi(float(t), float(s)))

    def alpha_spectral(self, t: float) -> np.ndarray:
        if self.bias is None:
            return np.zeros(self.dim)
        return self.operator.to_spectral(np.asarray(self.bias(float(t)), dtype=float))

    # -- per-eigenvalue kernels -----------------------------------------------

    def _method(self, method: str) -> str:
        if method == "auto":
            return "closed" if self.has_closed_form else "quadrature"
        if method not in ("closed", "quadrature"):
            raise DataError(f"unknown kernel method {method!r}")
        if method == "closed" and not self.has_closed_form:
            raise DataError(f"no closed form for variant {self.variant}")
        return method

    def var_spectrum(self, t: float, s: float = 0.0, method: str = "auto") -> np.ndarray:
        """Eigenvalues of ``K_{t|s}`` for ``s <= t``."""
        t, s = float(t), float(s)
        if s > t:
            raise DataError(f"transition covariance needs s <= t, got s={s}, t={t}")
        lam = self.eigs
        if t == s:
            return np.zeros_like(lam)
        if self._method(method) == "closed":
            dt = t - s
            if self.variant == "tsheat_ve":
                smin, smax, c = self.params["sigma_min"], self.params["sigma_max"], self.params["c"]
                log_r = np.log(smax / smin)
                a = log_r + c * lam
                return smin**2 * log_r * np.exp(2 * t * log_r) * 2 * dt * _phi1(2 * a * dt)
            g, c = self.params["g"], self.params["c"]
            return g**2 * dt * _phi1(2 * c * lam * dt)

        def integrand(tau):
            return self.g2(tau)[:, None] * np.exp(2 * self.log_psi(t, tau))

        return adaptive_gauss_legendre(integrand, s, t, rtol=QUAD_RTOL)

    def cross_spectrum(self, t1: float, t2: float, method: str = "auto") -> np.ndarray:
        """Eigenvalues of ``K_{t1 t2} = Psi_{max,min} K_{min|0}``."""
        lo, hi = sorted((float(t1), float(t2)))
        return self.psi(hi, lo) * self.var_spectrum(lo, 0.0, method)

    def dcross_spectrum(self, t: float, u: float, method: str = "auto") -> np.ndarray:
        """``d/dt K_{t u}`` for ``t <= u``."""
        t, u = float(t), float(u)
        if t > u:
            raise DataError("derivative is defined for t <= u")
        return self.eta(t) * self.cross_spectrum(t, u, method) + self.g2(t) * self.psi(u, t)

    def bias_spectrum(self, t: float, s: float = 0.0) -> np.ndarray:
        """``int_s^t Psi_{t tau} alpha_tau dtau`` in eigen coordinates."""
        t, s = float(t), float(s)
        if self.bias is None or t == s:
            return np.zeros(self.dim)

        def integrand(tau):
            a = np.array([self.alpha_spectral(x) for x in np.atleast_1d(tau)])
            return np.exp(self.log_psi(t, tau)) * a

        return adaptive_gauss_legendre(integrand, s, t, rtol=QUAD_RTOL, atol=1e-14)

    def dbias_spectrum(self, t: float) -> np.ndarray:
        """``d/dt xi_t``."""
        return self.eta(t) * self.bias_spectrum(t) + self.alpha_spectral(t)


# -- factories -----------------------------------------------------------------

def _const(value: float):
    return lambda t: np.full(np.shape(t), float(value))


def tsheat_bm(operator, c: float, g: float) -> ReferenceDynamics:
    """``dY = -c L Y dt + g dW``."""
    if not (c > 0 and g > 0):
        raise DataError("TSHeat-BM needs c > 0 and g > 0")
    op = _as_operator(operator)
    _check_psd_operator(op)
    return ReferenceDynamics("tsheat_bm", op, heat_schedule(c), _const(g), None,
                             {"c": float(c), "g": float(g)})


def tsheat_ve(operator, c: float, sigma_min: float, sigma_max: float) -> ReferenceDynamics:
    """``dY = -c L Y dt + g_t dW`` with ``g_t = s_min r^t sqrt(2 ln r)``, ``r = s_max / s_min``."""
    if not (c > 0 and sigma_min > 0 and sigma_max > sigma_min):
        raise DataError("TSHeat-VE needs c > 0 and 0 < sigma_min < sigma_max")
    op = _as_operator(operator)
    _check_psd_operator(op)
    log_r = float(np.log(sigma_max / sigma_min))
    scale = sigma_min * np.sqrt(2 * log_r)

    def g(t):
        return scale * np.exp(log_r * np.asarray(t, dtype=float))

    return ReferenceDynamics("tsheat_ve", op, heat_schedule(c), g, None,
                             {"c": float(c), "sigma_min": float(sigma_min), "sigma_max": float(sigma_max)})


def tsheat_vp(operator, c: float, beta_min: float, beta_max: float) -> ReferenceDynamics:
    """``dY = -(beta_t / 2 + c L) Y dt + sqrt(beta_t) dW`` with linear ``beta_t``."""
    if not (c >= 0 and beta_min > 0 and beta_max > beta_min):
        raise DataError("TSHeat-VP needs c >= 0 and 0 < beta_min < beta_max")
    op = _as_operator(operator)
    _check_psd_operator(op)
    sched = CoefficientSchedule([(-0.5 * beta_min, -0.5 * (beta_max - beta_min)), -float(c)])

    def g(t):
        return np.sqrt(beta_min + (beta_max - beta_min) * np.asarray(t, dtype=float))

    return ReferenceDynamics("tsheat_vp", op, sched, g, None,
                             {"c": float(c), "beta_min": float(beta_min), "beta_max": float(beta_max)})


def general_linear(operator, schedule, diffusion, bias=None) -> ReferenceDynamics:
    """Arbitrary drift polynomial, bias ``alpha_t`` and diffusion ``g_t``.

    ``schedule`` is a :class:`CoefficientSchedule` or a coefficient list;
    ``diffusion`` is a positive number or a function of ``t``.
    """
    op = _as_operator(operator)
    sched = schedule if isinstance(schedule, CoefficientSchedule) else CoefficientSchedule(schedule)
    g = _const(diffusion) if np.isscalar(diffusion) else _vectorize(diffusion)
    if bias is not None and not callable(bias):
        const_bias = np.asarray(bias, dtype=float)
        if const_bias.shape != (op.dim,):
            raise DataError(f"bias must have length {op.dim}")
        bias = lambda t, b=const_bias: b  # noqa: E731
    return ReferenceDynamics("general_linear", op, sched, g, bias,
                             {"degree": sched.degree})


def heterogeneous(l_down, l_up, c1: float, c2: float, g: float) -> ReferenceDynamics:
    """``dY = -(c1 L_down + c2 L_up) Y dt + g dW``."""
    if not (c1 > 0 and c2 > 0 and g > 0):
        raise DataError("heterogeneous diffusion needs c1, c2, g > 0")
    ld = np.asarray(l_down, dtype=float)
    lu = np.asarray(l_up, dtype=float)
    if ld.shape != lu.shape:
        raise DataError("down and up Laplacians must have the same shape")
    if max(np.abs(ld @ lu).max(initial=0), np.abs(lu @ ld).max(initial=0)) > 1e-10:
        raise DataError("down and up Laplacians must annihilate each other")
    op = eigendecompose(c1 * ld + c2 * lu)
    _check_psd_operator(op)
    return ReferenceDynamics("heterogeneous", op, heat_schedule(1.0), _const(g), None,
                             {"c": 1.0, "c1": float(c1), "c2": float(c2), "g": float(g)})


def from_config(cfg: dict, operator) -> ReferenceDynamics:
    """Build dynamics from a JSON-style dict (``variant`` plus parameters)."""
    variant = cfg.get("variant")
    try:
        if variant == "tsheat_bm":
            return tsheat_bm(operator, cfg["c"], cfg["g"])
        if variant == "tsheat_ve":
            return tsheat_ve(operator, cfg["c"], cfg["sigma_min"], cfg["sigma_max"])
        if variant == "tsheat_vp":
            return tsheat_vp(operator, cfg.get("c", 0.0), cfg["beta_min"], cfg["beta_max"])
        if variant == "brownian":
            op = _as_operator(operator)
            return general_linear(op, [0.0], cfg.get("g", 1.0))
        if variant == "general_linear":
            coeffs = [tuple(c) if isinstance(c, list) else c for c in cfg["coefficients"]]
            return general_linear(operator, coeffs, cfg.get("g", 1.0), cfg.get("bias"))
    except KeyError as exc:
        raise DataError(f"dynamics config for {variant!r} is missing {exc.args[0]!r}") from None
    raise DataError(f"unknown dynamics variant {variant!r}")


# -- matrix-level operations ----------------------------------------------------

@dataclass(frozen=True)
class TransitionKernelStats:
    """``Y_t | Y_s ~ N(mean_map @ y_s + bias, cov)``."""

    mean_map: np.ndarray
    bias: np.ndarray
    cov: np.ndarray


def drift(dyn: ReferenceDynamics, t: float, y, method: str = "spectral") -> np.ndarray:
    """``H_t(L) y + alpha_t``; ``y`` may be a batch with states on the last axis."""
    y = np.asarray(y, dtype=float)
    if method == "spectral":
        out = dyn.operator.from_spectral(dyn.eta(t) * dyn.operator.to_spectral(y))
    elif method == "polynomial":
        out = dyn.schedule.apply(dyn.operator.matrix, y, float(t))
    else:
        raise DataError(f"unknown drift method {method!r}")
    if dyn.bias is not None:
        out = out + np.asarray(dyn.bias(float(t)), dtype=float)
    return out


def diffusion_coeff(dyn: ReferenceDynamics, t: float) -> float:
    return dyn.g(t)


def transition_matrix(dyn: ReferenceDynamics, t: float, s: float = 0.0) -> np.ndarray:
    return dyn.operator.assemble(dyn.psi(t, s))


def bias_term(dyn: ReferenceDynamics, t: float, s: float = 0.0) -> np.ndarray:
    """``xi`` contribution of the transition mean from ``s`` to ``t``."""
    return dyn.operator.from_spectral(dyn.bias_spectrum(t, s))


def cond_mean(dyn: ReferenceDynamics, t: float, s: float, y_s) -> np.ndarray:
    """``E[Y_t | Y_s = y_s]``."""
    if s > t:
        raise DataError("cond_mean needs s <= t")
    y = dyn.operator.to_spectral(np.asarray(y_s, dtype=float))
    return dyn.operator.from_spectral(dyn.psi(t, s) * y + dyn.bias_spectrum(t, s))


def cross_cov(dyn: ReferenceDynamics, t1: float, t2: float, method: str = "auto") -> np.ndarray:
    """``Cov(Y_t1, Y_t2)`` for ``Y_0`` deterministic."""
    return dyn.operator.assemble(dyn.cross_spectrum(t1, t2, method))


def transition_cov(dyn: ReferenceDynamics, t: float, s: float = 0.0, method: str = "auto") -> np.ndarray:
    """``K_{t|s}``."""
    return dyn.operator.assemble(dyn.var_spectrum(t, s, method))


def transition_kernel(dyn: ReferenceDynamics, t: float, s: float = 0.0) -> TransitionKernelStats:
    return TransitionKernelStats(transition_matrix(dyn, t, s), bias_term(dyn, t, s), transition_cov(dyn, t, s))


def _marginal_spectral(dyn, nu0: GaussianMeasure, t):
    op = dyn.operator
    psi = dyn.psi(t)
    mean = psi * op.to_spectral(nu0.mean) + dyn.bias_spectrum(t)
    cov = psi[:, None] * op.to_spectral(nu0.cov) * psi[None, :] + np.diag(dyn.var_spectrum(t))
    return mean, symmetrize(cov)


def marginal_from_gaussian_init(dyn: ReferenceDynamics, nu0: GaussianMeasure, t: float) -> GaussianMeasure:
    """Law of ``Y_t`` when ``Y_0 ~ nu0``."""
    if t == 0:
        return nu0
    mean, cov = _marginal_spectral(dyn, nu0, t)
    return GaussianMeasure(dyn.operator.from_spectral(mean), dyn.operator.from_spectral(cov))


def score_affine(dyn: ReferenceDynamics, nu0: GaussianMeasure, t: float):
    """``(P, mu)`` with score ``-(x - mu) @ P`` (``P`` the marginal precision)."""
    mean, cov = _marginal_spectral(dyn, nu0, t)
    lam, v = np.linalg.eigh(cov)
    lam = floored_values(lam, f"marginal covariance at t={t:g}")
    prec = dyn.operator.from_spectral(symmetrize((v / lam) @ v.T))
    return symmetrize(prec), dyn.operator.from_spectral(mean)


def analytic_score(dyn: ReferenceDynamics, nu0: GaussianMeasure, t: float, x) -> np.ndarray:
    """``grad log p_t(x)`` of the Gaussian marginal."""
    prec, mu = score_affine(dyn, nu0, t)
    return -(np.asarray(x, dtype=float) - mu) @ prec


def doob_h_drift(dyn: ReferenceDynamics, t: float, x, x1) -> np.ndarray:
    """Drift of the reference process pinned at ``x1`` at time 1."""
    t = float(t)
    if t >= 1.0:
        raise EndpointSingularity("the pinned drift is singular at t = 1")
    op = dyn.operator
    k = dyn.var_spectrum(1.0, t)
    if np.any(k <= 0) or not np.all(np.isfinite(k)):
        raise EndpointSingularity(f"K_(1|t) is singular at t={t:g}")
    psi = dyn.psi(1.0, t)
    xs = op.to_spectral(np.asarray(x, dtype=float))
    m = psi * xs + dyn.bias_spectrum(1.0, t)
    corr = dyn.g2(t) * psi / k * (op.to_spectral(np.asarray(x1, dtype=float)) - m)
    return drift(dyn, t, x) + op.from_spectral(corr)


@dataclass(frozen=True)
class BridgeCoefficients:
    """Per-eigenvalue ``R_t``, ``Rbar_t``, ``Gamma_t`` of the reference bridge."""

    r: np.ndarray
    rbar: np.ndarray
    gamma: np.ndarray


def bridge_coefficients(dyn: ReferenceDynamics, t: float, method: str = "auto") -> BridgeCoefficients:
    """Stable forms ``R = Psi_{1t} K_{t|0} / K_{1|0}``, ``Rbar = Psi_t K_{1|t} / K_{1|0}``,
    ``Gamma = K_{t|0} K_{1|t} / K_{1|0}``; all exact at both endpoints."""
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DataError(f"time {t} outside [0, 1]")
    k11 = dyn.var_spectrum(1.0, 0.0, method)
    if np.any(k11 <= 0) or not np.all(np.isfinite(k11)):
        raise SingularEndpointCovariance("K_11 is singular")
    k11 = floored_values(k11, "K_11")
    kt0 = dyn.var_spectrum(t, 0.0, method)
    k1t = dyn.var_spectrum(1.0, t, method)
    return BridgeCoefficients(dyn.psi(1.0, t) * kt0 / k11, dyn.psi(t) * k1t / k11, kt0 * k1t / k11)


def reference_bridge_conditional(dyn: ReferenceDynamics, t: float, y0, y1) -> GaussianMeasure:
    """Law of ``Y_t`` given ``Y_0 = y0`` and ``Y_1 = y1``."""
    op = dyn.operator
    bc = bridge_coefficients(dyn, t)
    mean = (bc.rbar * op.to_spectral(np.asarray(y0, dtype=float))
            + bc.r * op.to_spectral(np.asarray(y1, dtype=float))
            + dyn.bias_spectrum(t) - bc.r * dyn.bias_spectrum(1.0))
    return GaussianMeasure(op.from_spectral(mean), op.assemble(bc.gamma))
