"""Ensemble simulation: Euler-Maruyama, bridge/score/Doob samplers, FB-SDEs,
likelihood estimation and the probability-flow ODE.

Randomness contract: paths are split into fixed-size blocks and block ``b`` of
stream ``s`` draws from ``SeedSequence([seed, s, b])``.  Results therefore do
not depend on how many threads process the blocks.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .dynamics import ReferenceDynamics, doob_h_drift, drift as ref_drift, score_affine
from .errors import DataError, EndpointSingularity, NonFiniteState
from .gp import sample_gp
from .gtsb import GTSBridge
from .measures import GaussianMeasure

BLOCK = 1024
DELTA = 1e-3


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing time points in ``[0, 1]``."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1)
        if p.size < 2:
            raise DataError("a time grid needs at least two points")
        if np.any(np.diff(p) <= 0):
            raise DataError("time grid must be strictly increasing")
        if p[0] < 0 or p[-1] > 1:
            raise DataError("time grid must lie in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @classmethod
    def uniform(cls, start: float = 0.0, end: float = 1.0, steps: int = 500) -> "TimeGrid":
        if steps < 1 or not start < end:
            raise DataError("uniform grid needs steps >= 1 and start < end")
        return cls(np.linspace(start, end, int(steps) + 1))

    @property
    def start(self) -> float:
        return float(self.points[0])

    @property
    def end(self) -> float:
        return float(self.points[-1])

    @property
    def steps(self) -> int:
        return len(self.points) - 1

    def index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.points - t)))


@dataclass(frozen=True, eq=False)
class TrajectoryEnsemble:
    """``states[m, j]`` is path ``m`` at ``times[j]`` (ascending)."""

    times: np.ndarray
    states: np.ndarray
    seed: int | None = None
    fingerprint: str = ""

    def __post_init__(self):
        if self.states.ndim != 3 or self.states.shape[1] != len(self.times):
            raise DataError("states must be paths x times x dim")

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.states[:, -1]

    @property
    def initial(self) -> np.ndarray:
        return self.states[:, 0]

    def at(self, t: float) -> np.ndarray:
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > 1e-9:
            raise DataError(f"time {t} was not recorded")
        return self.states[:, j]

    def moments(self, t: float):
        """``(mean, cov, standard error of the mean)`` at time ``t``."""
        x = self.at(t)
        cov = np.atleast_2d(np.cov(x, rowvar=False))
        return x.mean(axis=0), cov, np.sqrt(np.diag(cov) / len(x))


@dataclass(frozen=True)
class PolicyPair:
    """Forward and backward control fields with optional analytic divergences."""

    z: Callable[[float, np.ndarray], np.ndarray]
    zhat: Callable[[float, np.ndarray], np.ndarray]
    div_z: Callable[[float, np.ndarray], np.ndarray] | None = None
    div_zhat: Callable[[float, np.ndarray], np.ndarray] | None = None

    @classmethod
    def zero(cls) -> "PolicyPair":
        def z(t, x):
            return np.zeros_like(np.asarray(x, dtype=float))

        def div(t, x):
            return np.zeros(np.asarray(x).shape[:-1])

        return cls(z, z, div, div)


def _rng(seed, stream: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(block)]))


def _record_indices(grid: TimeGrid, record) -> np.ndarray:
    if record is None:
        return np.arange(len(grid.points))
    idx = sorted({grid.index(t) for t in np.atleast_1d(record)})
    for t in np.atleast_1d(record):
        if abs(grid.points[grid.index(t)] - t) > 1e-9:
            raise DataError(f"record time {t} is not a grid point")
    return np.asarray(idx)


def euler_maruyama(drift, diff, init, grid: TimeGrid, seed: int, direction: str = "forward",
                   record: Sequence[float] | None = None, stream: int = 0, threads: int = 1,
                   fingerprint: str = "") -> TrajectoryEnsemble:
    """Euler-Maruyama ensemble.

    ``forward`` starts at ``grid.start``: ``X+ = X + b(t, X) dt + g(t) sqrt(dt) xi``.
    ``backward`` starts at ``grid.end`` and integrates a reverse-time SDE whose
    drift ``b`` is written in forward time: ``X- = X - b(t, X) dt + g(t) sqrt(dt) xi``.
    ``record`` restricts stored times (default: every grid point).
    """
    if direction not in ("forward", "backward"):
        raise DataError(f"unknown direction {direction!r}")
    if seed is None:
        raise DataError("a seed is required")
    init = np.atleast_2d(np.asarray(init, dtype=float))
    if not np.all(np.isfinite(init)):
        raise NonFiniteState(0, "initial states are not finite")
    pts = grid.points
    keep = _record_indices(grid, record)
    m, n = init.shape
    order = range(grid.steps) if direction == "forward" else range(grid.steps, 0, -1)
    out = np.empty((m, len(keep), n))
    slot = {int(k): j for j, k in enumerate(keep)}

    def run_block(b: int):
        lo, hi = b * BLOCK, min(m, (b + 1) * BLOCK)
        rng = _rng(seed, stream, b)
        x = init[lo:hi].copy()
        k0 = 0 if direction == "forward" else grid.steps
        if k0 in slot:
            out[lo:hi, slot[k0]] = x
        for k in order:
            if direction == "forward":
                t, dt, nxt = pts[k], pts[k + 1] - pts[k], k + 1
                sign = 1.0
            else:
                t, dt, nxt = pts[k], pts[k] - pts[k - 1], k - 1
                sign = -1.0
            noise = rng.standard_normal(x.shape)
            x = x + sign * np.asarray(drift(t, x)) * dt + diff(t) * np.sqrt(dt) * noise
            if not np.all(np.isfinite(x)):
                raise NonFiniteState(nxt, f"state diverged at t={pts[nxt]:g}")
            if nxt in slot:
                out[lo:hi, slot[nxt]] = x

    blocks = range((m + BLOCK - 1) // BLOCK)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run_block, blocks))
    else:
        for b in blocks:
            run_block(b)
    return TrajectoryEnsemble(pts[keep].copy(), out, seed, fingerprint)


def _affine_table(fn, times) -> dict:
    return {float(t): fn(float(t)) for t in times}


def _clamp(t: float, delta: float) -> float:
    return min(max(float(t), delta), 1.0 - delta)


def simulate_gtsb(bridge: GTSBridge, x0_samples, grid: TimeGrid, seed: int, delta: float = DELTA,
                  record=None, threads: int = 1) -> TrajectoryEnsemble:
    """Integrate the bridge SDE from ``x0_samples``; the drift is clamped to ``[delta, 1 - delta]``."""
    table = _affine_table(lambda t: bridge.drift_affine(_clamp(t, delta)), grid.points[:-1])

    def b(t, x):
        a, c = table[float(t)]
        return x @ a.T + c

    return euler_maruyama(b, bridge.dyn.g, x0_samples, grid, seed, record=record,
                          threads=threads, fingerprint=bridge.dyn.fingerprint)


@dataclass(frozen=True)
class ForwardBackward:
    forward: TrajectoryEnsemble
    backward: TrajectoryEnsemble


def _reference_affine(dyn: ReferenceDynamics, t: float):
    op = dyn.operator
    h = op.assemble(dyn.eta(t))
    a = np.zeros(dyn.dim) if dyn.bias is None else np.asarray(dyn.bias(t), dtype=float)
    return h, a


def simulate_reverse_score(dyn: ReferenceDynamics, nu0: GaussianMeasure, grid: TimeGrid, count: int,
                           seed: int, record=None, threads: int = 1) -> ForwardBackward:
    """Forward reference SDE from ``nu0``, then the reverse SDE with drift
    ``f - g^2 grad log p_t`` from the forward terminal states."""
    x0 = sample_gp(nu0.cov, nu0.mean, count, np.random.SeedSequence([int(seed), 100]))
    ref = _affine_table(lambda t: _reference_affine(dyn, t), grid.points)
    score = _affine_table(lambda t: score_affine(dyn, nu0, t), grid.points[1:])

    def fwd(t, x):
        h, a = ref[float(t)]
        return x @ h.T + a

    def bwd(t, x):
        h, a = ref[float(t)]
        prec, mu = score[float(t)]
        return x @ h.T + a + dyn.g2(t) * ((x - mu) @ prec)

    forward = euler_maruyama(fwd, dyn.g, x0, grid, seed, record=None if record is None else
                             sorted(set(np.atleast_1d(record)) | {grid.end}), stream=1,
                             threads=threads, fingerprint=dyn.fingerprint)
    backward = euler_maruyama(bwd, dyn.g, forward.final, grid, seed, direction="backward",
                              record=None if record is None else
                              sorted(set(np.atleast_1d(record)) | {grid.start}),
                              stream=2, threads=threads, fingerprint=dyn.fingerprint)
    return ForwardBackward(forward, backward)


def simulate_doob_bridge(dyn: ReferenceDynamics, x0, x1, grid: TimeGrid, count: int, seed: int,
                         record=None, threads: int = 1) -> TrajectoryEnsemble:
    """Reference process pinned at ``x1``; the grid must stop before ``t = 1``."""
    if grid.end >= 1.0:
        raise EndpointSingularity("Doob bridge grids must end before t = 1")
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    n = dyn.dim

    def affine(t):
        cols = doob_h_drift(dyn, t, np.vstack([np.zeros(n), np.eye(n)]), x1)
        return cols[1:] - cols[0], cols[0]  # rows of the Jacobian transpose, offset

    table = _affine_table(affine, grid.points[:-1])

    def b(t, x):
        jt, c = table[float(t)]
        return x @ jt + c

    init = np.broadcast_to(x0, (count, n)) if x0.ndim == 1 else x0
    return euler_maruyama(b, dyn.g, init, grid, seed, record=record, threads=threads,
                          fingerprint=dyn.fingerprint)


def simulate_fb_tsde(dyn: ReferenceDynamics, policies: PolicyPair, nu0_samples, nu1_samples,
                     grid: TimeGrid, seed: int, record=None, threads: int = 1) -> ForwardBackward:
    """Forward drift ``f + g Z`` from ``nu0_samples``; backward drift ``f - g Zhat`` from ``nu1_samples``."""

    def fwd(t, x):
        return ref_drift(dyn, t, x) + dyn.g(t) * policies.z(t, x)

    def bwd(t, x):
        return ref_drift(dyn, t, x) - dyn.g(t) * policies.zhat(t, x)

    forward = euler_maruyama(fwd, dyn.g, nu0_samples, grid, seed, record=record, stream=1,
                             threads=threads, fingerprint=dyn.fingerprint)
    backward = euler_maruyama(bwd, dyn.g, nu1_samples, grid, seed, direction="backward",
                              record=record, stream=2, threads=threads, fingerprint=dyn.fingerprint)
    return ForwardBackward(forward, backward)


def optimal_gaussian_policies(bridge: GTSBridge, delta: float = DELTA) -> PolicyPair:
    """Policies of the solved bridge: ``Z = (f_bridge - f) / g`` and
    ``Zhat = g grad log p_t - Z``, with exact divergences."""
    dyn = bridge.dyn

    @lru_cache(maxsize=4096)
    def pieces(t):
        from .gtsb import marginal

        a, b = bridge.drift_affine(t)
        h, alpha = _reference_affine(dyn, t)
        meas = marginal(bridge, t).measure
        prec = np.linalg.inv(meas.cov)
        prec = 0.5 * (prec + prec.T)
        g = dyn.g(t)
        jz = (a - h) / g
        return jz, (b - alpha) / g, prec, meas.mean, g

    def z(t, x):
        jz, cz, _, _, _ = pieces(_clamp(t, delta))
        return x @ jz.T + cz

    def zhat(t, x):
        jz, cz, prec, mu, g = pieces(_clamp(t, delta))
        return -(x @ jz.T + cz) - g * ((x - mu) @ prec)

    def div_z(t, x):
        jz = pieces(_clamp(t, delta))[0]
        return np.full(np.asarray(x).shape[:-1], np.trace(jz))

    def div_zhat(t, x):
        jz, _, prec, _, g = pieces(_clamp(t, delta))
        return np.full(np.asarray(x).shape[:-1], -np.trace(jz) - g * np.trace(prec))

    return PolicyPair(z, zhat, div_z, div_zhat)


def hutchinson_divergence(field, t: float, x, probes: int, rng: np.random.Generator) -> np.ndarray:
    """``E[u^T (grad F) u]`` with Gaussian ``u`` and central differences,
    step ``1e-4 (1 + |x|)``; one value per row of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h = 1e-4 * (1.0 + np.linalg.norm(x, axis=1, keepdims=True))
    total = np.zeros(len(x))
    for _ in range(int(probes)):
        u = rng.standard_normal(x.shape)
        d = (np.asarray(field(t, x + h * u)) - np.asarray(field(t, x - h * u))) / (2 * h)
        total += np.sum(d * u, axis=1)
    return total / probes


@dataclass(frozen=True)
class LikelihoodEstimate:
    value: float
    stderr: float
    per_path: np.ndarray
    kinetic: np.ndarray
    terminal: np.ndarray


def likelihood_bound(dyn: ReferenceDynamics, policies: PolicyPair, x0, grid: TimeGrid, count: int,
                     probes: int, seed: int, use_analytic: bool = True) -> LikelihoodEstimate:
    """``int E[|Zhat|^2 / 2 + g div Zhat + Z . Zhat] dt`` along forward paths from ``x0``.

    Trapezoid rule on ``grid``.  The divergence is analytic when the policy
    provides it (and ``use_analytic``), otherwise Hutchinson with ``probes``
    Gaussian probes.  ``kinetic`` holds the per-path ``int |Z|^2 / 2 dt``.
    """
    if probes < 1:
        raise DataError("probes must be at least 1")
    x0 = np.asarray(x0, dtype=float)
    init = np.broadcast_to(x0, (count, x0.shape[-1]))

    def fwd(t, x):
        return ref_drift(dyn, t, x) + dyn.g(t) * policies.z(t, x)

    ens = euler_maruyama(fwd, dyn.g, init, grid, seed, stream=1, fingerprint=dyn.fingerprint)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    w = np.zeros(len(grid.points))
    dts = np.diff(grid.points)
    w[:-1] += 0.5 * dts
    w[1:] += 0.5 * dts
    bound = np.zeros(count)
    kinetic = np.zeros(count)
    for j, t in enumerate(grid.points):
        x = ens.states[:, j]
        z = np.asarray(policies.z(t, x))
        zh = np.asarray(policies.zhat(t, x))
        if use_analytic and policies.div_zhat is not None:
            div = np.asarray(policies.div_zhat(t, x))
        else:
            div = hutchinson_divergence(policies.zhat, t, x, probes, rng)
        term = 0.5 * np.sum(zh * zh, axis=1) + dyn.g(t) * div + np.sum(z * zh, axis=1)
        if not np.all(np.isfinite(term)):
            raise NonFiniteState(j, f"likelihood integrand is not finite at t={t:g}")
        bound += w[j] * term
        kinetic += w[j] * 0.5 * np.sum(z * z, axis=1)
    return LikelihoodEstimate(float(bound.mean()), float(bound.std(ddof=1) / np.sqrt(count)),
                              bound, kinetic, ens.final)


def log_likelihood(dyn: ReferenceDynamics, policies: PolicyPair, nu1: GaussianMeasure, x0,
                   grid: TimeGrid, count: int, probes: int, seed: int, use_analytic: bool = True):
    """``log p_0(x0) = E[log nu1(X_1)] - int E|Z|^2/2 - bound + int tr(H_t) dt``.

    Returns ``(value, stderr)``.
    """
    est = likelihood_bound(dyn, policies, x0, grid, count, probes, seed, use_analytic)
    eta_tr = np.array([np.sum(dyn.eta(t)) for t in grid.points])
    div_f = float(np.sum(0.5 * np.diff(grid.points) * (eta_tr[1:] + eta_tr[:-1])))
    per_path = nu1.logpdf(est.terminal) - est.kinetic - est.per_path + div_f
    return float(per_path.mean()), float(per_path.std(ddof=1) / np.sqrt(len(per_path)))


def probability_flow(dyn: ReferenceDynamics, policies: PolicyPair, init, grid: TimeGrid,
                     record=None) -> TrajectoryEnsemble:
    """RK4 integration of ``dx/dt = f + g Z - g (Z + Zhat) / 2``."""
    init = np.atleast_2d(np.asarray(init, dtype=float))

    def v(t, x):
        g = dyn.g(t)
        z = policies.z(t, x)
        return ref_drift(dyn, t, x) + g * z - 0.5 * g * (z + policies.zhat(t, x))

    pts = grid.points
    keep = _record_indices(grid, record)
    slot = {int(k): j for j, k in enumerate(keep)}
    out = np.empty((init.shape[0], len(keep), init.shape[1]))
    x = init.copy()
    if 0 in slot:
        out[:, slot[0]] = x
    for k in range(grid.steps):
        t, h = pts[k], pts[k + 1] - pts[k]
        k1 = v(t, x)
        k2 = v(t + h / 2, x + h / 2 * k1)
        k3 = v(t + h / 2, x + h / 2 * k2)
        k4 = v(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(k + 1, f"flow diverged at t={pts[k + 1]:g}")
        if k + 1 in slot:
            out[:, slot[k + 1]] = x
    return TrajectoryEnsemble(pts[keep].copy(), out, None, dyn.fingerprint)


def write_ensemble_csv(path, ens: TrajectoryEnsemble) -> None:
    """``path_id,t,x_0,...,x_{n-1}`` with full double precision."""
    n = ens.states.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "t"] + [f"x_{i}" for i in range(n)])
        for m in range(ens.size):
            for j, t in enumerate(ens.times):
                w.writerow([m, "%.17g" % t] + ["%.17g" % v for v in ens.states[m, j]])
