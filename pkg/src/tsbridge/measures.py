"""Gaussian measures and symmetric PSD matrix helpers."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NotPSD

logger = logging.getLogger(__name__)

PSD_TOL = 1e-10
INVERSE_FLOOR = 1e-12


class FlooredInverseWarning(RuntimeWarning):
    """Eigenvalues were raised to the inverse floor before inversion."""


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def check_psd(m: np.ndarray, name: str = "matrix", tol: float = PSD_TOL) -> np.ndarray:
    """Return the symmetrized matrix or raise :class:`NotPSD`."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DataError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NotPSD(f"{name} has non-finite entries")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > tol * scale:
        raise NotPSD(f"{name} is not symmetric")
    m = symmetrize(m)
    if m.size and np.linalg.eigvalsh(m)[0] < -tol * scale:
        raise NotPSD(f"{name} is not positive semi-definite")
    return m


def psd_eigh(m: np.ndarray):
    lam, u = np.linalg.eigh(symmetrize(m))
    return np.clip(lam, 0.0, None), u


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to zero."""
    lam, u = psd_eigh(m)
    return symmetrize((u * np.sqrt(lam)) @ u.T)


def inv_sqrtm_psd(m: np.ndarray, rcond: float = 1e-12) -> np.ndarray:
    """Pseudo-inverse square root; eigenvalues below ``rcond * max`` are dropped."""
    lam, u = psd_eigh(m)
    cut = rcond * max(lam.max(initial=0.0), np.finfo(float).tiny)
    inv = np.zeros_like(lam)
    keep = lam > cut
    inv[keep] = 1.0 / np.sqrt(lam[keep])
    return symmetrize((u * inv) @ u.T)


def floored_values(values: np.ndarray, what: str, floor: float = INVERSE_FLOOR) -> np.ndarray:
    """Raise values below ``floor`` and report that it happened."""
    values = np.asarray(values, dtype=float)
    low = values < floor
    if np.any(low):
        msg = f"{what}: {int(low.sum())} eigenvalue(s) floored at {floor:g} before inversion"
        logger.info(msg)
        warnings.warn(msg, FlooredInverseWarning, stacklevel=3)
        values = np.where(low, floor, values)
    return values


def psd_inverse(m: np.ndarray, what: str = "matrix", floor: float = INVERSE_FLOOR) -> np.ndarray:
    lam, u = np.linalg.eigh(symmetrize(m))
    lam = floored_values(lam, what, floor)
    return symmetrize((u / lam) @ u.T)


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    """``N(mean, cov)`` on the signal space."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cov = check_psd(self.cov, "covariance")
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        if mean.shape[0] != cov.shape[0]:
            raise DataError(f"mean has length {mean.shape[0]} but covariance is {cov.shape}")
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "mean", mean)

    @classmethod
    def centered(cls, cov) -> "GaussianMeasure":
        cov = np.asarray(cov, dtype=float)
        return cls(np.zeros(len(cov)), cov)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lam, u = np.linalg.eigh(self.cov)
        if lam[0] <= 0:
            from .errors import SingularCovariance

            raise SingularCovariance("log-density needs a positive definite covariance")
        z = (x - self.mean) @ u
        quad = np.sum(z * z / lam, axis=-1)
        return -0.5 * (quad + np.sum(np.log(lam)) + self.dim * np.log(2 * np.pi))

    def sample(self, count: int, seed=None) -> np.ndarray:
        from .gp import sample_gp

        return sample_gp(self.cov, self.mean, count, seed)
