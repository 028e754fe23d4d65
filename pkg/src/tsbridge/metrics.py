"""Distances between Gaussians and between sample sets, and the Dirichlet-energy functional."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .errors import DataError, NoConvergence, SingularCovariance, SizeLimitExceeded
from .measures import GaussianMeasure, check_psd, sqrtm_psd
from .spectral import SpectralOperator

EXACT_LIMIT = 2000


@dataclass(frozen=True)
class DistanceReport:
    name: str
    value: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value) or self.value < 0:
            raise DataError(f"invalid distance value {self.value}")

    def to_dict(self) -> dict:
        return {"name": self.name, "value": self.value, **self.metadata}


def bures_wasserstein(cov_a, cov_b, mean_a=None, mean_b=None) -> float:
    """2-Wasserstein distance between ``N(mean_a, cov_a)`` and ``N(mean_b, cov_b)``.

    Evaluated as the orthogonal Procrustes residual
    ``min_U |A^{1/2} - B^{1/2} U|_F``, which avoids the cancellation in
    ``tr A + tr B - 2 tr (A^{1/2} B A^{1/2})^{1/2}`` for nearby arguments.
    """
    a = check_psd(cov_a, "first covariance")
    b = check_psd(cov_b, "second covariance")
    if a.shape != b.shape:
        raise DataError("covariances have different shapes")
    ah, bh = sqrtm_psd(a), sqrtm_psd(b)
    p, _, qt = np.linalg.svd(bh @ ah)
    sq = float(np.sum((ah - bh @ p @ qt) ** 2))
    if mean_a is not None or mean_b is not None:
        n = a.shape[0]
        ma = np.zeros(n) if mean_a is None else np.asarray(mean_a, dtype=float)
        mb = np.zeros(n) if mean_b is None else np.asarray(mean_b, dtype=float)
        sq += float(np.sum((ma - mb) ** 2))
    return float(np.sqrt(sq))


def bures_wasserstein_trace(cov_a, cov_b) -> float:
    """Trace formula for the Bures-Wasserstein distance (reference route)."""
    a = check_psd(cov_a)
    b = check_psd(cov_b)
    ah = sqrtm_psd(a)
    cross = sqrtm_psd(ah @ b @ ah)
    return float(np.sqrt(max(np.trace(a) + np.trace(b) - 2 * np.trace(cross), 0.0)))


def gaussian_kl(nu_a: GaussianMeasure, nu_b: GaussianMeasure) -> float:
    """``KL(nu_a || nu_b)``; infinite when ``nu_a`` is degenerate."""
    if nu_a.dim != nu_b.dim:
        raise DataError("dimensions differ")
    try:
        lb = np.linalg.cholesky(nu_b.cov)
    except np.linalg.LinAlgError:
        raise SingularCovariance("KL needs an invertible second covariance") from None
    sign, logdet_a = np.linalg.slogdet(nu_a.cov)
    if sign <= 0:
        return float("inf")
    logdet_b = 2 * np.sum(np.log(np.diag(lb)))
    inv_l = np.linalg.solve(lb, np.eye(nu_a.dim))
    prec_b = inv_l.T @ inv_l
    d = nu_b.mean - nu_a.mean
    val = 0.5 * (np.trace(prec_b @ nu_a.cov) + d @ prec_b @ d - nu_a.dim + logdet_b - logdet_a)
    return float(max(val, 0.0))


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or len(x) == 0:
        raise DataError("sample sets must be nonempty 2-d arrays")
    return x


def _exact(cost: np.ndarray):
    m, k = cost.shape
    if m == k:
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean()), {"solver": "assignment"}
    a_eq = np.zeros((m + k, m * k))
    for i in range(m):
        a_eq[i, i * k:(i + 1) * k] = 1.0
    for j in range(k):
        a_eq[m + j, j::k] = 1.0
    b_eq = np.concatenate([np.full(m, 1.0 / m), np.full(k, 1.0 / k)])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise NoConvergence(f"transport LP failed: {res.message}")
    return float(res.fun), {"solver": "linprog"}


def _sinkhorn(cost: np.ndarray, epsilon: float, max_iter: int, tol: float):
    m, k = cost.shape
    scale = float(cost.max()) or 1.0
    eps = epsilon * scale
    log_a = np.full(m, -np.log(m))
    log_b = np.full(k, -np.log(k))
    f = np.zeros(m)
    g = np.zeros(k)
    residual = np.inf
    for it in range(1, max_iter + 1):
        f = eps * (log_a - logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (log_b - logsumexp((f[:, None] - cost) / eps, axis=0))
        if it % 10 == 0 or it == max_iter:
            log_p = (f[:, None] + g[None, :] - cost) / eps
            residual = float(np.abs(np.exp(logsumexp(log_p, axis=1)) - np.exp(log_a)).sum())
            if residual < tol:
                plan = np.exp(log_p)
                return float(np.sum(plan * cost)), {"iterations": it, "residual": residual,
                                                    "epsilon": epsilon}
    raise NoConvergence(f"Sinkhorn did not converge in {max_iter} iterations (residual {residual:.3g})")


def empirical_wasserstein(samples_a, samples_b, p: int = 2, method: str = "exact",
                          epsilon: float = 1e-3, max_iter: int = 20000, tol: float = 1e-5) -> DistanceReport:
    """``W_p`` between uniform empirical measures on full sample vectors.

    ``exact`` solves the assignment problem (equal sizes) or the transport LP,
    up to 2000 points per side.  ``sinkhorn`` runs log-domain iterations with
    regularization ``epsilon * max(cost)`` and reports the transport cost of
    the entropic plan.
    """
    if p not in (1, 2):
        raise DataError("order must be 1 or 2")
    a, b = _as_samples(samples_a), _as_samples(samples_b)
    if a.shape[1] != b.shape[1]:
        raise DataError("sample dimensions differ")
    cost = cdist(a, b) ** p
    if method == "exact":
        if max(len(a), len(b)) > EXACT_LIMIT:
            raise SizeLimitExceeded(f"exact transport is limited to {EXACT_LIMIT} points per side")
        val, meta = _exact(cost)
    elif method == "sinkhorn":
        val, meta = _sinkhorn(cost, epsilon, max_iter, tol)
    else:
        raise DataError(f"unknown method {method!r}")
    return DistanceReport(f"W{p}", float(max(val, 0.0) ** (1.0 / p)), {"method": method, **meta})


def dirichlet_functional(nu: GaussianMeasure, operator, c: float, g: float) -> float:
    """``c E[x^T L x / 2] - g^2 H(nu) / 2`` for a Gaussian ``nu``."""
    lap = operator.matrix if isinstance(operator, SpectralOperator) else np.asarray(operator, dtype=float)
    sign, logdet = np.linalg.slogdet(nu.cov)
    if sign <= 0:
        raise SingularCovariance("entropy needs a positive definite covariance")
    entropy = 0.5 * (nu.dim * np.log(2 * np.pi * np.e) + logdet)
    energy = 0.5 * (nu.mean @ lap @ nu.mean + np.sum(lap * nu.cov))
    return float(c * energy - 0.5 * g**2 * entropy)
