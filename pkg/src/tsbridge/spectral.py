"""Eigendecomposition of symmetric operators and matrix functions through it.

Every kernel in the package is a function of one symmetric operator ``L``.
After a single ``eigh`` the work reduces to scalar formulas evaluated on the
eigenvalues and reassembled as ``U diag(f(lam)) U^T``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ConvergenceFailure, DataError, NotSymmetric, SingularFunctionValue

SYMMETRY_TOL = 1e-8
NEG_CLAMP = 1e-10
MAX_DEGREE = 8


@dataclass(frozen=True, eq=False)
class SpectralOperator:
    """Cached ``L = U diag(eigenvalues) U^T`` of a symmetric matrix."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    matrix: np.ndarray
    source_hash: str

    @property
    def dim(self) -> int:
        return len(self.eigenvalues)

    @property
    def clamped_eigenvalues(self) -> np.ndarray:
        lam = self.eigenvalues.copy()
        lam[(lam < 0) & (lam > -NEG_CLAMP)] = 0.0
        return lam

    def to_spectral(self, x: np.ndarray) -> np.ndarray:
        """Coordinates in the eigenbasis (last axis for vectors, both axes for matrices)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 2 and x.shape == (self.dim, self.dim):
            return self.eigenvectors.T @ x @ self.eigenvectors
        return x @ self.eigenvectors

    def from_spectral(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 2 and x.shape == (self.dim, self.dim):
            return self.eigenvectors @ x @ self.eigenvectors.T
        return x @ self.eigenvectors.T

    def assemble(self, diag_values: np.ndarray) -> np.ndarray:
        """``U diag(values) U^T``, symmetrized."""
        u = self.eigenvectors
        m = (u * diag_values[None, :]) @ u.T
        return 0.5 * (m + m.T)


def matrix_hash(matrix: np.ndarray) -> str:
    a = np.ascontiguousarray(matrix, dtype=float)
    return hashlib.sha1(a.tobytes() + str(a.shape).encode()).hexdigest()


@lru_cache(maxsize=64)
def _cached_eigh(key: str, shape, data: bytes):
    m = np.frombuffer(data, dtype=float).reshape(shape)
    try:
        return np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc)) from None


def eigendecompose(matrix, tol: float = SYMMETRY_TOL) -> SpectralOperator:
    """Symmetric eigendecomposition, cached on the matrix fingerprint."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DataError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DataError("matrix has non-finite entries")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > tol * scale:
        raise NotSymmetric("matrix is not symmetric within tolerance")
    m = np.ascontiguousarray(0.5 * (m + m.T))
    key = matrix_hash(m)
    lam, u = _cached_eigh(key, m.shape, m.tobytes())
    lam.setflags(write=False)
    u.setflags(write=False)
    m.setflags(write=False)
    return SpectralOperator(lam, u, m, key)


ScalarFunction = Union[str, Callable[[np.ndarray], np.ndarray]]

_NAMED = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "identity": lambda x: x,
}


def matrix_function(op: SpectralOperator, f: ScalarFunction, floor: float | None = None) -> np.ndarray:
    """``U f(Lambda) U^T``.

    Named functions: ``exp``, ``log``, ``sqrt``, ``identity``, ``inv``.
    ``floor`` raises eigenvalues below it before ``f`` is applied, which is
    how a regularized inverse is requested.
    """
    lam = op.clamped_eigenvalues
    if floor is not None:
        lam = np.maximum(lam, floor)
    if isinstance(f, str):
        if f == "inv":
            fn = np.reciprocal
        else:
            try:
                fn = _NAMED[f]
            except KeyError:
                raise DataError(f"unknown matrix function {f!r}") from None
    else:
        fn = f
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        vals = np.asarray(fn(lam), dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = lam[~np.isfinite(vals)]
        raise SingularFunctionValue(f"function is not finite at eigenvalue(s) {bad[:3]}")
    return op.assemble(vals)


def fractional_power(op: SpectralOperator, exponent: float, shift: float = 0.0) -> np.ndarray:
    """``(shift I + L)^exponent``."""
    return matrix_function(op, lambda lam: np.power(shift + lam, exponent))


# -- quadrature ---------------------------------------------------------------

@lru_cache(maxsize=8)
def _legendre(order: int):
    return np.polynomial.legendre.leggauss(order)


def gauss_legendre(f, a: float, b: float, panels: int = 1, order: int = 64):
    """Composite Gauss-Legendre rule; ``f`` maps an array of nodes to values
    stacked along the first axis."""
    x, w = _legendre(order)
    edges = np.linspace(a, b, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    vals = np.asarray(f(nodes), dtype=float)
    return np.tensordot(weights, vals, axes=(0, 0))


def adaptive_gauss_legendre(f, a: float, b: float, rtol: float = 1e-10, atol: float = 0.0,
                            order: int = 64, max_panels: int = 1024):
    """Integrate with a 64-point rule, doubling panels until two successive
    estimates agree to ``rtol`` (elementwise for vector-valued integrands)."""
    if a == b:
        return np.zeros_like(np.asarray(f(np.array([a])), dtype=float)[0])
    prev = gauss_legendre(f, a, b, 1, order)
    panels = 1
    while panels < max_panels:
        panels *= 2
        cur = gauss_legendre(f, a, b, panels, order)
        err = np.abs(cur - prev)
        if np.all(err <= rtol * np.abs(cur) + atol):
            return cur
        prev = cur
    raise ConvergenceFailure(f"quadrature did not converge on [{a}, {b}] with {max_panels} panels")


# -- coefficient schedules ----------------------------------------------------

@dataclass(frozen=True)
class Coefficient:
    """A scalar coefficient ``h(t)``: constant, ``a + b t``, or a callable."""

    kind: str = "constant"
    a: float = 0.0
    b: float = 0.0
    fn: Callable | None = None

    @classmethod
    def of(cls, spec) -> "Coefficient":
        if isinstance(spec, Coefficient):
            return spec
        if callable(spec):
            return cls("callable", fn=spec)
        if isinstance(spec, (tuple, list)):
            if len(spec) != 2:
                raise DataError("linear coefficient must be (intercept, slope)")
            return cls("linear", float(spec[0]), float(spec[1]))
        return cls("constant", float(spec))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full_like(t, self.a)
        if self.kind == "linear":
            return self.a + self.b * t
        return np.vectorize(self.fn, otypes=[float])(t)

    def integral(self, t, s):
        """``int_s^t h(tau) dtau``; ``t`` and ``s`` broadcast."""
        t, s = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
        if self.kind == "constant":
            return self.a * (t - s)
        if self.kind == "linear":
            return self.a * (t - s) + 0.5 * self.b * (t * t - s * s)
        out = np.empty(t.shape)
        for idx in np.ndindex(t.shape):
            lo, hi = float(s[idx]), float(t[idx])
            out[idx] = adaptive_gauss_legendre(self, lo, hi) if lo != hi else 0.0
        return out

    @property
    def is_zero(self) -> bool:
        return self.kind in ("constant", "linear") and self.a == 0.0 and self.b == 0.0


class CoefficientSchedule:
    """Coefficients ``h_0..h_K`` of the drift polynomial ``H_t = sum_k h_k(t) L^k``."""

    def __init__(self, coefficients: Sequence):
        coeffs = tuple(Coefficient.of(c) for c in coefficients)
        if not coeffs:
            coeffs = (Coefficient(),)
        if len(coeffs) - 1 > MAX_DEGREE:
            raise DataError(f"polynomial degree is capped at {MAX_DEGREE}")
        self.coefficients = coeffs

    def __repr__(self):
        return f"CoefficientSchedule(degree={self.degree})"

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    @property
    def is_zero(self) -> bool:
        return all(c.is_zero for c in self.coefficients)

    def values(self, t) -> np.ndarray:
        return np.array([c(t) for c in self.coefficients])

    def integrals(self, t, s) -> np.ndarray:
        return np.array([c.integral(t, s) for c in self.coefficients])

    def drift_spectrum(self, eigenvalues: np.ndarray, t: float) -> np.ndarray:
        """Eigenvalues of ``H_t``."""
        return np.polynomial.polynomial.polyval(eigenvalues, [float(c(t)) for c in self.coefficients])

    def log_transition(self, eigenvalues: np.ndarray, t, s) -> np.ndarray:
        """``sum_k htilde_k^{t,s} lam^k``; shape ``broadcast(t, s).shape + (n,)``."""
        tilde = self.integrals(t, s)  # (K+1, *shape)
        powers = np.power.outer(eigenvalues, np.arange(self.degree + 1))  # (n, K+1)
        return np.moveaxis(np.tensordot(powers, tilde, axes=(1, 0)), 0, -1)

    def apply(self, matrix: np.ndarray, y: np.ndarray, t: float) -> np.ndarray:
        """``H_t y`` by Horner recursion on ``L y`` products."""
        vals = [float(c(t)) for c in self.coefficients]
        out = vals[-1] * y
        for h in reversed(vals[:-1]):
            out = out @ matrix.T + h * y
        return out


def heat_schedule(c: float) -> CoefficientSchedule:
    """``H_t = -c L``."""
    return CoefficientSchedule([0.0, -float(c)])


def transition_matrix(op: SpectralOperator, sched: CoefficientSchedule, t: float, s: float) -> np.ndarray:
    """``Psi_{ts} = exp(int_s^t H_tau dtau)``."""
    return op.assemble(np.exp(sched.log_transition(op.eigenvalues, t, s)))
