"""Acceptance checks shared by the test suite and ``tsbridge experiment synthetic``.

Each check uses an evaluation route that is independent of the production
path it validates: dense ``scipy.linalg.expm`` quadrature for kernels,
Monte-Carlo ensembles for marginals, textbook formulas for the Brownian
special cases.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import expm

from . import dynamics as D
from .gtsb import GTSBridge, classical_eot_coupling, interpolant_sample, marginal, solve_static
from .measures import GaussianMeasure
from .metrics import bures_wasserstein
from .sim import (
    TimeGrid,
    log_likelihood,
    optimal_gaussian_policies,
    simulate_doob_bridge,
    simulate_gtsb,
    simulate_reverse_score,
)
from .spectral import CoefficientSchedule, eigendecompose, fractional_power, matrix_function, transition_matrix
from .topology import (
    LaplacianSpec,
    build_complex,
    hodge_projectors,
    incidence,
    laplacian,
)

DELTA = 1e-3
PATHS = 20000
STEPS = 500


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    value: float
    threshold: float
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] criterion {self.number}: {self.name}: value={self.value:.3e} "
                f"threshold={self.threshold:.3e} ({self.seconds:.1f}s)")

    def to_dict(self) -> dict:
        return {"number": self.number, "name": self.name, "passed": bool(self.passed),
                "value": float(self.value), "threshold": float(self.threshold), "detail": self.detail}


def _timed(number, name, threshold, budget=None):
    def deco(fn):
        def run(seed: int = 0) -> CheckResult:
            start = time.perf_counter()
            passed, value, detail = fn(seed)
            secs = time.perf_counter() - start
            if budget is not None and secs > budget:
                passed = False
                detail = {**detail, "over_budget_seconds": budget}
            return CheckResult(number, name, bool(passed), float(value), threshold, detail, secs)

        run.__name__ = fn.__name__
        run.number = number
        return run

    return deco


# -- instance builders -----------------------------------------------------------

def random_connected_graph(rng: np.random.Generator, n: int, extra: int):
    edges = {tuple(sorted((i, int(rng.integers(0, i))))) for i in range(1, n)}
    while len(edges) < min(n - 1 + extra, n * (n - 1) // 2):
        i, j = rng.choice(n, 2, replace=False)
        edges.add(tuple(sorted((int(i), int(j)))))
    return build_complex(sorted(edges), num_nodes=n)


def random_complex(rng: np.random.Generator, n: int, p_edge: float = 0.5, p_tri: float = 0.6):
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p_edge]
    eset = set(edges)
    tris = [(i, j, k) for i in range(n) for j in range(i + 1, n) for k in range(j + 1, n)
            if {(i, j), (j, k), (i, k)} <= eset and rng.random() < p_tri]
    return build_complex(edges, tris, num_nodes=n)


def random_spd(rng: np.random.Generator, n: int, floor: float = 0.1) -> np.ndarray:
    a = rng.normal(size=(n, n))
    return a @ a.T / n + floor * np.eye(n)


@lru_cache(maxsize=None)
def eight_node_operator():
    cx = build_complex([[0, 1], [1, 2], [2, 3], [3, 4], [4, 5], [5, 6], [6, 7], [0, 7], [1, 5], [2, 6]])
    return eigendecompose(laplacian(cx))


@lru_cache(maxsize=None)
def eight_node_endpoints():
    op = eight_node_operator()
    rng = np.random.default_rng(0)
    nu0 = GaussianMeasure(rng.normal(size=8), fractional_power(op, -1.5, 1.0))
    nu1 = GaussianMeasure(rng.normal(size=8) + 1.0, matrix_function(op, lambda lam: 0.5 * np.exp(-0.5 * lam)))
    return nu0, nu1


def eight_node_bridges():
    op = eight_node_operator()
    nu0, nu1 = eight_node_endpoints()
    return {"bm": GTSBridge(D.tsheat_bm(op, 0.5, 1.0), nu0, nu1),
            "ve": GTSBridge(D.tsheat_ve(op, 1.0, 0.1, 1.0), nu0, nu1)}


def terminal_grid(steps: int = STEPS, delta: float = DELTA) -> TimeGrid:
    """Uniform grid on ``[0, 1]`` whose last point is moved to ``1 - delta``."""
    pts = np.linspace(0.0, 1.0, steps + 1)
    pts[-1] = 1.0 - delta
    return TimeGrid(pts)


CHECK_TIMES = (0.25, 0.5, 0.75, 1.0 - DELTA)


def _moments(x):
    return x.mean(axis=0), np.cov(x, rowvar=False), x.std(axis=0, ddof=1) / np.sqrt(len(x))


def _rel_frob(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@lru_cache(maxsize=4)
def eight_node_runs(seed: int):
    """SDE and interpolant ensembles for both eight-node bridges."""
    out = {}
    grid = terminal_grid()
    for name, bridge in eight_node_bridges().items():
        x0 = bridge.nu0.sample(PATHS, np.random.SeedSequence([seed, 11]))
        sde = simulate_gtsb(bridge, x0, grid, seed, delta=DELTA, record=list(CHECK_TIMES))
        p0, p1 = bridge.coupling.sample(PATHS, np.random.SeedSequence([seed, 12]))
        zrng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
        interp = {t: interpolant_sample(bridge, p0, p1, t, zrng.standard_normal(p0.shape)) for t in CHECK_TIMES}
        formula = {t: marginal(bridge, t).measure for t in CHECK_TIMES}
        out[name] = {"sde": {t: sde.at(t) for t in CHECK_TIMES}, "interp": interp, "formula": formula}
    return out


# -- oracle for kernels ----------------------------------------------------------

def quadrature_cross_cov(lap: np.ndarray, c: float, g2, t1: float, t2: float, points: int = 10001):
    """``int_0^m g^2(tau) exp(-c L (t1 + t2 - 2 tau)) dtau`` by composite Simpson
    on ``points`` nodes, with dense matrix exponentials."""
    m = min(t1, t2)
    n = lap.shape[0]
    if m == 0:
        return np.zeros((n, n))
    intervals = points - 1
    h = m / intervals
    step = expm(-2.0 * c * h * lap)
    cur = expm(-c * (t1 + t2 - 2.0 * m) * lap)
    taus = np.linspace(0.0, m, points)
    w = np.ones(points)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    acc = np.zeros((n, n))
    for j in range(points - 1, -1, -1):
        acc += w[j] * float(g2(taus[j])) * cur
        cur = cur @ step
    return acc * h / 3.0


# -- criteria --------------------------------------------------------------------

@_timed(1, "bridge boundary exactness on the synthetic graph", 1e-6, budget=60)
def check_boundary(seed):
    from .experiments import bw_curve, synthetic_bridges

    times = np.round(np.linspace(0.0, 1.0, 51), 12)
    detail, ok, worst = {}, True, 0.0
    for name, b in synthetic_bridges().items():
        bw0 = bures_wasserstein(marginal(b, 0.0).measure.cov, b.nu0.cov)
        curve = bw_curve(b, times)
        detail[name] = {"bw_t0_to_sigma0": bw0, "bw_t1_to_sigma1": float(curve[-1])}
        ok &= bw0 < 1e-8 and curve[-1] < 1e-6
        worst = max(worst, float(curve[-1]))
    return ok, worst, detail


@_timed(2, "VE curve separation (c=0.01 vs c=10)", 0.01)
def check_separation(seed):
    from .experiments import bw_curve, synthetic_bridges

    times = np.round(np.linspace(0.0, 1.0, 51), 12)
    br = synthetic_bridges(ve_cs=(0.01, 10.0))
    gap = float(np.max(np.abs(bw_curve(br["ve_c0.01"], times) - bw_curve(br["ve_c10"], times))))
    return gap > 0.01, gap, {"sup_gap": gap}


@_timed(3, "closed-form kernels vs 1e4-point quadrature", 1e-6, budget=30)
def check_kernel_oracle(seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    from .experiments import synthetic_operator

    errs = []
    op = synthetic_operator()
    dyn = D.tsheat_ve(op, 10.0, 0.01, 1.0)
    cases = [(dyn, 10.0, 1.0, 1.0)]
    for k in range(9):
        n = int(rng.integers(5, 31))
        lop = eigendecompose(laplacian(random_connected_graph(rng, n, int(rng.integers(0, 2 * n)))))
        c = float(np.exp(rng.uniform(np.log(0.01), np.log(10.0))))
        if k % 2 == 0:
            dyn = D.tsheat_bm(lop, c, float(rng.uniform(0.01, 1.0)))
        else:
            smin = float(rng.uniform(0.01, 0.1))
            dyn = D.tsheat_ve(lop, c, smin, float(rng.uniform(0.5, 2.0)))
        cases.append((dyn, c, float(rng.uniform(0.05, 1.0)), float(rng.uniform(0.05, 1.0))))
    for dyn, c, t1, t2 in cases:
        closed = D.cross_cov(dyn, t1, t2, method="closed")
        oracle = quadrature_cross_cov(dyn.operator.matrix, c, dyn.g2, t1, t2)
        errs.append(_rel_frob(closed, oracle))
    worst = max(errs)
    return worst < 1e-6, worst, {"relative_errors": errs}


@_timed(4, "bridge SDE ensemble vs marginal formulas (8-dim, BM and VE)", 0.05, budget=180)
def check_drift(seed):
    runs = eight_node_runs(seed)
    detail, ok, worst = {}, True, 0.0
    for name, r in runs.items():
        for t in CHECK_TIMES:
            mean, cov, se = _moments(r["sde"][t])
            f = r["formula"][t]
            z = float(np.max(np.abs(mean - f.mean) / se))
            rel = _rel_frob(cov, f.cov)
            detail[f"{name}@{t:g}"] = {"max_mean_z": z, "cov_rel_frob": rel}
            ok &= z < 3.0 and rel < 0.05
            worst = max(worst, rel)
    return ok, worst, detail


@_timed(5, "interpolant / formula / SDE moment agreement", 0.05, budget=180)
def check_three_representations(seed):
    runs = eight_node_runs(seed)
    detail, ok, worst = {}, True, 0.0
    for name, r in runs.items():
        for t in CHECK_TIMES:
            f = r["formula"][t]
            mi, ci, sei = _moments(r["interp"][t])
            ms, cs, ses = _moments(r["sde"][t])
            z_if = float(np.max(np.abs(mi - f.mean) / sei))
            z_sf = float(np.max(np.abs(ms - f.mean) / ses))
            z_is = float(np.max(np.abs(mi - ms) / np.sqrt(sei**2 + ses**2)))
            rels = (_rel_frob(ci, f.cov), _rel_frob(cs, f.cov), _rel_frob(ci, cs))
            detail[f"{name}@{t:g}"] = {"z": [z_if, z_sf, z_is], "cov_rel": list(rels)}
            ok &= max(z_if, z_sf, z_is) < 3.0 and max(rels) < 0.05
            worst = max(worst, *rels)
    return ok, worst, detail


@_timed(6, "classical E-OT reduction for a Brownian reference", 1e-8)
def check_classical(seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    errs = []
    for _ in range(20):
        n = int(rng.integers(1, 11))
        lop = eigendecompose(laplacian(random_connected_graph(rng, n, n))) if n > 1 else eigendecompose(np.zeros((1, 1)))
        g = float(rng.uniform(0.1, 2.0))
        dyn = D.general_linear(lop, [0.0], g)
        nu0 = GaussianMeasure(rng.normal(size=n), random_spd(rng, n))
        nu1 = GaussianMeasure(rng.normal(size=n), random_spd(rng, n))
        c1 = solve_static(dyn, nu0, nu1).cross_cov
        c2 = classical_eot_coupling(nu0, nu1, g).cross_cov
        errs.append(float(np.max(np.abs(c1 - c2))))
    worst = max(errs)
    return worst < 1e-8, worst, {"max_abs_errors": errs}


@_timed(7, "reverse-score recovery of nu0 (VE c=0.01, synthetic graph)", 0.1)
def check_reverse_score(seed):
    from .experiments import synthetic_endpoints, synthetic_operator

    op = synthetic_operator()
    nu0, _ = synthetic_endpoints(op)
    dyn = D.tsheat_ve(op, 0.01, 0.01, 1.0)
    grid = TimeGrid.uniform(0.0, 1.0, STEPS)
    res = simulate_reverse_score(dyn, nu0, grid, PATHS, seed, record=[0.0, 1.0])
    fwd_cov = np.cov(res.forward.final, rowvar=False)
    back_cov = np.cov(res.backward.at(0.0), rowvar=False)
    bw_fwd = bures_wasserstein(fwd_cov, nu0.cov)
    bw_back = bures_wasserstein(back_cov, nu0.cov)
    ratio = bw_back / bw_fwd
    return ratio < 0.1, ratio, {"bw_forward_terminal": bw_fwd, "bw_backward": bw_back}


@_timed(8, "Doob-pinned bridges (Brownian variance, topological mean)", 3.0)
def check_doob(seed):
    op = eight_node_operator()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 8]))
    x0, x1 = rng.normal(size=8), rng.normal(size=8)
    grid = TimeGrid(np.linspace(0.0, 1.0, 1001)[:-1])
    times = [0.25, 0.5, 0.75]
    brown = D.general_linear(op, [0.0], 1.0)
    ens = simulate_doob_bridge(brown, x0, x1, grid, PATHS, seed, record=times)
    worst, detail = 0.0, {}
    for t in times:
        x = ens.at(t)
        var = x.var(axis=0, ddof=1)
        se = var * np.sqrt(2.0 / (len(x) - 1))
        z = float(np.max(np.abs(var - t * (1 - t)) / se))
        detail[f"brownian_var_z@{t:g}"] = z
        worst = max(worst, z)
    topo = D.tsheat_bm(op, 0.5, 1.0)
    ens = simulate_doob_bridge(topo, x0, x1, grid, PATHS, seed + 1, record=times)
    for t in times:
        x = ens.at(t)
        ref = D.reference_bridge_conditional(topo, t, x0, x1)
        z = float(np.max(np.abs(x.mean(axis=0) - ref.mean) / (x.std(axis=0, ddof=1) / np.sqrt(len(x)))))
        detail[f"topological_mean_z@{t:g}"] = z
        worst = max(worst, z)
    return worst < 3.0, worst, detail


@_timed(9, "likelihood of x0 from optimal Gaussian policies (2-dim Brownian)", 0.05)
def check_likelihood(seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 9]))
    op = eigendecompose(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    dyn = D.general_linear(op, [0.0], 1.0)
    nu0 = GaussianMeasure(rng.normal(size=2), random_spd(rng, 2, 0.2))
    nu1 = GaussianMeasure(rng.normal(size=2), random_spd(rng, 2, 0.2))
    bridge = GTSBridge(dyn, nu0, nu1)
    pol = optimal_gaussian_policies(bridge)
    grid = TimeGrid.uniform(0.0, 1.0, 200)
    errs = []
    for k, x0 in enumerate(nu0.sample(20, np.random.SeedSequence([seed, 90]))):
        est, _ = log_likelihood(dyn, pol, nu1, x0, grid, 4000, 1, seed * 1000 + k)
        exact = float(nu0.logpdf(x0))
        errs.append(abs(est - exact) / abs(exact))
    worst = max(errs)
    return worst < 0.05, worst, {"relative_errors": errs}


@_timed(10, "structural invariants", 1e-8, budget=120)
def check_structural(seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 10]))
    worst = {"b1b2": 0.0, "laplacian_asym": 0.0, "laplacian_min_eig": 0.0, "projector_identity": 0.0,
             "gamma_endpoints": 0.0, "coupling_min_eig": 0.0, "semigroup": 0.0}
    for _ in range(30):
        cx = random_complex(rng, int(rng.integers(3, 9)))
        inc = incidence(cx)
        worst["b1b2"] = max(worst["b1b2"], float(np.abs(inc.b1 @ inc.b2).max(initial=0.0)))
        if cx.n1 == 0:
            continue
        for kind in ("graph", "hodge_down", "hodge_up", "hodge_full"):
            norms = ["combinatorial", "max_eigenvalue_scaled"]
            if kind == "graph":
                norms += ["symmetric", "random_walk_symmetrized"]
            for norm in norms:
                lap = laplacian(cx, LaplacianSpec(kind, norm))
                worst["laplacian_asym"] = max(worst["laplacian_asym"], float(np.abs(lap - lap.T).max()))
                worst["laplacian_min_eig"] = min(worst["laplacian_min_eig"], float(np.linalg.eigvalsh(lap)[0]))
        proj = hodge_projectors(cx)
        total = proj["gradient"] + proj["curl"] + proj["harmonic"]
        worst["projector_identity"] = max(worst["projector_identity"],
                                          float(np.abs(total - np.eye(cx.n1)).max()))

    op = eight_node_operator()
    nu0, nu1 = eight_node_endpoints()
    cx = random_complex(np.random.default_rng(5), 6, 0.8, 1.0)
    ld = laplacian(cx, kind="hodge_down")
    lu = laplacian(cx, kind="hodge_up")
    edge_nu = GaussianMeasure(np.zeros(cx.n1), np.eye(cx.n1))
    variants = [
        (D.tsheat_bm(op, 0.5, 0.3), nu0, nu1),
        (D.tsheat_ve(op, 2.0, 0.05, 1.0), nu0, nu1),
        (D.tsheat_vp(op, 0.5, 0.1, 20.0), nu0, nu1),
        (D.general_linear(op, [(-0.2, 0.4), 0.0, -0.05], lambda t: 0.5 + t, np.ones(8)), nu0, nu1),
        (D.heterogeneous(ld, lu, 0.5, 2.0, 0.4), edge_nu, edge_nu),
    ]
    for dyn, a, b in variants:
        bc0, bc1 = D.bridge_coefficients(dyn, 0.0), D.bridge_coefficients(dyn, 1.0)
        worst["gamma_endpoints"] = max(worst["gamma_endpoints"], float(np.abs(bc0.gamma).max()),
                                       float(np.abs(bc1.gamma).max()))
        cp = solve_static(dyn, a, b)
        worst["coupling_min_eig"] = min(worst["coupling_min_eig"], cp.min_block_eigenvalue())

    for _ in range(100):
        n = int(rng.integers(2, 9))
        sop = eigendecompose(random_spd(rng, n, 0.0))
        sched = CoefficientSchedule([(rng.normal(), rng.normal()) for _ in range(int(rng.integers(1, 4)))])
        t, s, r = sorted(rng.uniform(0, 1, 3))[::-1]
        lhs = transition_matrix(sop, sched, t, s) @ transition_matrix(sop, sched, s, r)
        rhs = transition_matrix(sop, sched, t, r)
        worst["semigroup"] = max(worst["semigroup"], float(np.abs(lhs - rhs).max() / max(1.0, np.abs(rhs).max())))

    ok = (worst["b1b2"] == 0 and worst["laplacian_asym"] <= 1e-12 and worst["laplacian_min_eig"] >= -1e-10
          and worst["projector_identity"] <= 1e-10 and worst["gamma_endpoints"] <= 1e-8
          and worst["coupling_min_eig"] >= -1e-8 and worst["semigroup"] <= 1e-8)
    value = max(worst["b1b2"], worst["projector_identity"], worst["gamma_endpoints"], worst["semigroup"])
    return ok, value, worst


ALL = (check_boundary, check_separation, check_kernel_oracle, check_drift, check_three_representations,
       check_classical, check_reverse_score, check_doob, check_likelihood, check_structural)
QUICK = (check_boundary, check_separation, check_kernel_oracle, check_classical, check_structural)


def run(seed: int = 0, which: str = "all") -> list[CheckResult]:
    """Run ``all`` criteria or the ``quick`` closed-form subset."""
    chosen = ALL if which == "all" else QUICK
    return [check(seed) for check in chosen]
