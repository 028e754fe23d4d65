"""Gaussian-process kernels on graphs and edge spaces, and eigen-based sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, MissingProjectors
from .measures import check_psd, symmetrize
from .spectral import SpectralOperator, eigendecompose

FAMILIES = ("diffusion", "matern", "power")
SUBSPACES = ("full", "gradient", "curl", "harmonic")
SAMPLE_CUTOFF = 1e-12


@dataclass(frozen=True)
class GPKernelSpec:
    """Kernel ``sigma^2 P f(L) P`` with ``P`` the projector onto ``subspace``.

    ``diffusion``: ``f = exp(-kappa^2 lam / 2)``, or ``exp(-exponent lam)`` when
    ``exponent`` is given instead of ``kappa``.
    ``matern``: ``f = (2 nu / kappa^2 + lam)^(-nu)``.
    ``power``: ``f = (shift + lam)^(-exponent)``.
    """

    family: str
    kappa: float | None = None
    nu: float | None = None
    exponent: float | None = None
    shift: float = 0.0
    subspace: str = "full"
    sigma: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown GP family {self.family!r}")
        if self.subspace not in SUBSPACES:
            raise DataError(f"unknown subspace {self.subspace!r}")
        if not self.sigma > 0:
            raise DataError("sigma must be positive")
        if self.family == "diffusion":
            if (self.kappa is None) == (self.exponent is None):
                raise DataError("diffusion kernel needs exactly one of kappa and exponent")
            if (self.kappa if self.kappa is not None else self.exponent) < 0:
                raise DataError("diffusion scale must be nonnegative")
        elif self.family == "matern":
            if not (self.kappa and self.kappa > 0 and self.nu and self.nu > 0):
                raise DataError("Matern kernel needs kappa > 0 and nu > 0")
        else:
            if self.exponent is None or self.shift < 0:
                raise DataError("power kernel needs an exponent and a nonnegative shift")

    @classmethod
    def from_dict(cls, data: dict) -> "GPKernelSpec":
        allowed = {"family", "kappa", "nu", "exponent", "shift", "subspace", "sigma"}
        extra = set(data) - allowed
        if extra:
            raise DataError(f"unknown GP spec keys {sorted(extra)}")
        return cls(**data)

    def spectral_density(self, lam: np.ndarray) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        if self.family == "diffusion":
            rate = 0.5 * self.kappa**2 if self.kappa is not None else self.exponent
            return np.exp(-rate * lam)
        if self.family == "matern":
            return np.power(2.0 * self.nu / self.kappa**2 + lam, -self.nu)
        with np.errstate(divide="ignore"):
            return np.power(self.shift + lam, -float(self.exponent))


def gp_covariance(spec: GPKernelSpec, operator, projectors: dict | None = None) -> np.ndarray:
    """Covariance matrix of the kernel on the space of ``operator``."""
    op = operator if isinstance(operator, SpectralOperator) else eigendecompose(operator)
    vals = spec.sigma**2 * spec.spectral_density(op.clamped_eigenvalues)
    if not np.all(np.isfinite(vals)):
        raise DataError("kernel is infinite on the spectrum; add a positive shift")
    cov = op.assemble(vals)
    if spec.subspace != "full":
        if not projectors or spec.subspace not in projectors:
            raise MissingProjectors(f"{spec.subspace} kernel needs Hodge projectors")
        p = np.asarray(projectors[spec.subspace], dtype=float)
        if p.shape != cov.shape:
            raise DataError("projector shape does not match the operator")
        cov = symmetrize(p @ cov @ p)
    return cov


def sample_gp(cov, mean=None, count: int = 1, seed=None, rank: int | None = None) -> np.ndarray:
    """``count`` draws from ``N(mean, cov)`` as rows.

    Uses eigenpairs with eigenvalue above ``1e-12``; ``rank`` keeps only the
    largest ones.
    """
    cov = check_psd(cov, "covariance")
    n = cov.shape[0]
    mean = np.zeros(n) if mean is None else np.asarray(mean, dtype=float).reshape(n)
    lam, u = np.linalg.eigh(cov)
    keep = lam > SAMPLE_CUTOFF
    if rank is not None:
        if rank < 1:
            raise DataError("rank must be at least 1")
        keep &= np.arange(n) >= n - rank
    factor = u[:, keep] * np.sqrt(lam[keep])
    z = np.random.default_rng(seed).standard_normal((int(count), factor.shape[1]))
    return mean + z @ factor.T
