"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import jsonschema
import numpy as np

from . import dynamics as D
from . import sim as S
from .errors import DataError, NumericalError
from .experiments import run_synthetic, synthetic_graph, write_csv
from .gp import GPKernelSpec, gp_covariance
from .gtsb import (
    GTSBridge,
    conditional_given_endpoint,
    interpolant_sample,
    marginal,
    te_ot_objective,
)
from .measures import GaussianMeasure
from .metrics import EXACT_LIMIT, bures_wasserstein, empirical_wasserstein, gaussian_kl
from .spectral import eigendecompose
from .topology import (
    LaplacianSpec,
    build_complex,
    hodge_projectors,
    knn_graph,
    laplacian,
    load_complex,
    read_edge_csv,
    read_triangle_csv,
    save_complex,
)

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3

_MEASURE = {
    "type": "object",
    "properties": {
        "gp": {"type": "object"},
        "mean": {"type": "array", "items": {"type": "number"}},
        "cov": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "mean_file": {"type": "string"},
        "cov_file": {"type": "string"},
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["schema", "dynamics"],
    "properties": {
        "schema": {"const": 1},
        "topology": {
            "type": "object",
            "properties": {
                "bundled": {"enum": ["synthetic"]},
                "edges": {"type": "string"},
                "triangles": {"type": "string"},
                "complex": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "laplacian": {"type": "object"},
        "dynamics": {"type": "object", "required": ["variant"]},
        "nu0": _MEASURE,
        "nu1": _MEASURE,
        "grid": {
            "type": "object",
            "properties": {
                "start": {"type": "number", "minimum": 0, "maximum": 1},
                "end": {"type": "number", "minimum": 0, "maximum": 1},
                "steps": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "count": {"type": "integer", "minimum": 1},
        "delta": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
        "x0": {"type": "array", "items": {"type": "number"}},
        "x1": {"type": "array", "items": {"type": "number"}},
        "policies": {"enum": ["zero", "optimal"]},
        "record": {"type": "array", "items": {"type": "number"}},
    },
    "additionalProperties": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config loading --------------------------------------------------------------

class Context:
    """Resolved configuration: operator, dynamics, endpoints."""

    def __init__(self, cfg: dict, base: str, eps: float):
        self.cfg = cfg
        self.base = base
        self.eps = eps
        self.complex = self._complex(cfg.get("topology", {"bundled": "synthetic"}))
        lap_cfg = dict(cfg.get("laplacian") or cfg["dynamics"].get("laplacian") or {})
        lap_cfg.setdefault("perturbation", eps)
        try:
            self.lap_spec = LaplacianSpec(**lap_cfg)
        except TypeError as exc:
            raise DataError(f"bad laplacian spec: {exc}") from None
        self.op = eigendecompose(laplacian(self.complex, self.lap_spec))
        dyn_cfg = {k: v for k, v in cfg["dynamics"].items() if k != "laplacian"}
        self.dyn = D.from_config(dyn_cfg, self.op)

    def path(self, rel: str) -> str:
        return rel if os.path.isabs(rel) else os.path.join(self.base, rel)

    def _complex(self, topo: dict):
        if "complex" in topo:
            return load_complex(self.path(topo["complex"]))
        if "edges" in topo:
            edges, weights = read_edge_csv(self.path(topo["edges"]))
            tris = read_triangle_csv(self.path(topo["triangles"])) if "triangles" in topo else []
            return build_complex(edges, tris, edge_weights=weights)
        return synthetic_graph()

    def measure(self, key: str) -> GaussianMeasure:
        spec = self.cfg.get(key)
        if spec is None:
            raise DataError(f"config needs {key!r}")
        n = self.op.dim
        if "gp" in spec:
            gp = GPKernelSpec.from_dict(spec["gp"])
            proj = hodge_projectors(self.complex) if gp.subspace != "full" else None
            cov = gp_covariance(gp, self.op, proj)
        elif "cov" in spec:
            cov = np.asarray(spec["cov"], dtype=float)
        elif "cov_file" in spec:
            cov = _read_matrix(self.path(spec["cov_file"]))
        else:
            raise DataError(f"{key} needs one of gp, cov, cov_file")
        if "mean" in spec:
            mean = np.asarray(spec["mean"], dtype=float)
        elif "mean_file" in spec:
            mean = _read_matrix(self.path(spec["mean_file"])).reshape(-1)
        else:
            mean = np.zeros(n)
        if cov.shape != (n, n) or mean.shape != (n,):
            raise DataError(f"{key} does not match signal dimension {n}")
        return GaussianMeasure(mean, cov)

    def grid(self, default_steps: int = 500) -> S.TimeGrid:
        g = self.cfg.get("grid", {})
        return S.TimeGrid.uniform(g.get("start", 0.0), g.get("end", 1.0), g.get("steps", default_steps))

    @property
    def count(self) -> int:
        return int(self.cfg.get("count", 2000))

    @property
    def delta(self) -> float:
        return float(self.cfg.get("delta", S.DELTA))


def _read_matrix(path: str) -> np.ndarray:
    """Numeric CSV, with or without a header row."""
    with open(path) as fh:
        first = fh.readline().split(",")[0].strip()
    try:
        float(first)
        skip = 0
    except ValueError:
        skip = 1
    try:
        return np.atleast_1d(np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=1))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_config(path: str, eps: float) -> Context:
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise DataError(f"{path}: schema error at {loc}: {exc.message}") from None
    return Context(cfg, os.path.dirname(os.path.abspath(path)), eps)


def parse_times(spec: str) -> np.ndarray:
    """``a:b:h`` range (inclusive of ``b``) or comma-separated list."""
    try:
        if ":" in spec:
            a, b, h = (float(x) for x in spec.split(":"))
            if h <= 0 or b < a:
                raise ValueError
            k = int(round((b - a) / h))
            return np.round(a + h * np.arange(k + 1), 12)
        return np.array([float(x) for x in spec.split(",")])
    except ValueError:
        raise UsageError(f"bad time specification {spec!r}") from None


def _write_matrix(path, m) -> None:
    m = np.atleast_2d(m)
    write_csv(path, [f"c{j}" for j in range(m.shape[1])], m)


def _write_json(path, data) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _moments_summary(ens: S.TrajectoryEnsemble, outdir: str, prefix: str) -> list[dict]:
    rows = []
    for j, t in enumerate(ens.times):
        x = ens.states[:, j]
        cov = np.atleast_2d(np.cov(x, rowvar=False)) if len(x) > 1 else np.zeros((x.shape[1],) * 2)
        name = f"{prefix}_cov_{j:04d}.csv"
        _write_matrix(os.path.join(outdir, name), cov)
        rows.append({"t": float(t), "mean": x.mean(axis=0).tolist(), "cov_file": name,
                     "variance": np.diag(cov).tolist()})
    return rows


def _export(ens: S.TrajectoryEnsemble, outdir: str, prefix: str, paths: int) -> str:
    name = f"{prefix}_ensemble.csv"
    sub = S.TrajectoryEnsemble(ens.times, ens.states[:paths], ens.seed, ens.fingerprint)
    S.write_ensemble_csv(os.path.join(outdir, name), sub)
    return name


# -- commands --------------------------------------------------------------------

def cmd_topology(args) -> None:
    if args.action == "build":
        if args.knn is not None:
            if not args.points:
                raise UsageError("--knn needs --points")
            pts = _read_matrix(args.points)
            pts = np.atleast_2d(pts if pts.ndim == 2 else pts[:, None])
            cx = knn_graph(pts, args.knn, metric=args.metric, weighted=args.weighted)
        elif args.edges:
            edges, weights = read_edge_csv(args.edges)
            tris = read_triangle_csv(args.triangles) if args.triangles else []
            cx = build_complex(edges, tris, edge_weights=weights)
        else:
            raise UsageError("give --edges or --knn with --points")
        save_complex(args.out, cx)
        print(json.dumps({"n0": cx.n0, "n1": cx.n1, "n2": cx.n2}))
    else:
        cx = load_complex(args.complex) if args.complex else synthetic_graph()
        spec = LaplacianSpec(args.kind, args.normalization, args.eps)
        op = eigendecompose(laplacian(cx, spec))
        write_csv(args.out, ["index", "eigenvalue"], np.column_stack([np.arange(op.dim), op.eigenvalues]))
        if args.vectors:
            _write_matrix(args.vectors, op.eigenvectors)


def _bridge(ctx: Context) -> GTSBridge:
    return GTSBridge(ctx.dyn, ctx.measure("nu0"), ctx.measure("nu1"))


def cmd_bridge(args) -> None:
    ctx = load_config(args.config, args.eps)
    os.makedirs(args.out, exist_ok=True)
    bridge = _bridge(ctx)
    if args.action == "solve":
        cp = bridge.coupling
        _write_matrix(os.path.join(args.out, "coupling.csv"), cp.cross_cov)
        for key in ("C", "D", "Sigma0", "Sigma1"):
            _write_matrix(os.path.join(args.out, f"tilde_{key}.csv"), cp.tilde[key])
        _write_json(os.path.join(args.out, "solve.json"), {
            "dynamics": ctx.dyn.fingerprint,
            "dim": bridge.dim,
            "min_block_eigenvalue": cp.min_block_eigenvalue(),
            "te_ot_objective": te_ot_objective(bridge),
            "coupling_file": "coupling.csv",
        })
    elif args.action == "marginal":
        times = parse_times(args.t)
        means, bw = [], []
        for j, t in enumerate(times):
            m = marginal(bridge, float(t)).measure
            means.append([t, *m.mean])
            _write_matrix(os.path.join(args.out, f"cov_{j:04d}.csv"), m.cov)
            bw.append([t, bures_wasserstein(m.cov, bridge.nu1.cov)])
        write_csv(os.path.join(args.out, "means.csv"), ["t", *[f"x_{i}" for i in range(bridge.dim)]], means)
        write_csv(os.path.join(args.out, "bw_curve.csv"), ["t", "bw_to_sigma1"], bw)
    else:
        times = parse_times(args.t)
        count = args.count or ctx.count
        seq = np.random.SeedSequence([args.seed, 20])
        if args.mode == "interpolant":
            x0, x1 = bridge.coupling.sample(count, seq)
            rng = np.random.default_rng(np.random.SeedSequence([args.seed, 21]))
            states = np.stack([interpolant_sample(bridge, x0, x1, float(t), rng.standard_normal(x0.shape))
                               for t in times], axis=1)
            ens = S.TrajectoryEnsemble(times, states, args.seed, ctx.dyn.fingerprint)
        elif args.mode == "sde":
            grid = ctx.grid()
            x0 = bridge.nu0.sample(count, seq)
            ens = S.simulate_gtsb(bridge, x0, grid, args.seed, ctx.delta, record=_snap(grid, times),
                                  threads=args.threads)
        else:
            x0 = np.asarray(ctx.cfg["x0"], dtype=float) if "x0" in ctx.cfg else bridge.nu0.sample(1, seq)[0]
            rng = np.random.default_rng(np.random.SeedSequence([args.seed, 22]))
            states = []
            for t in times:
                law = conditional_given_endpoint(bridge, float(t), x0=x0)
                states.append(law.sample(count, rng.integers(2**32)))
            ens = S.TrajectoryEnsemble(times, np.stack(states, axis=1), args.seed, ctx.dyn.fingerprint)
        summary = {"mode": args.mode, "count": count, "seed": args.seed,
                   "ensemble_file": _export(ens, args.out, args.mode, args.export_paths),
                   "moments": _moments_summary(ens, args.out, args.mode)}
        _write_json(os.path.join(args.out, "summary.json"), summary)


def _snap(grid: S.TimeGrid, times) -> list[float]:
    return sorted({float(grid.points[grid.index(t)]) for t in times})


def cmd_sim(args) -> None:
    ctx = load_config(args.config, args.eps)
    os.makedirs(args.out, exist_ok=True)
    dyn = ctx.dyn
    grid = ctx.grid()
    count = args.count or ctx.count
    rec = ctx.cfg.get("record")
    record = _snap(grid, rec) if rec else _snap(grid, np.linspace(grid.start, grid.end, 11))
    summary = {"command": args.kind, "seed": args.seed, "count": count, "dynamics": dyn.fingerprint}
    if args.kind == "em":
        nu0 = ctx.measure("nu0")
        x0 = nu0.sample(count, np.random.SeedSequence([args.seed, 30]))
        ens = S.euler_maruyama(lambda t, x: D.drift(dyn, t, x), dyn.g, x0, grid, args.seed,
                               record=record, threads=args.threads, fingerprint=dyn.fingerprint)
        summary["ensemble_file"] = _export(ens, args.out, "em", args.export_paths)
        summary["moments"] = _moments_summary(ens, args.out, "em")
    elif args.kind == "reverse-score":
        nu0 = ctx.measure("nu0")
        res = S.simulate_reverse_score(dyn, nu0, grid, count, args.seed, record=record, threads=args.threads)
        fwd_cov = np.cov(res.forward.final, rowvar=False)
        back_cov = np.cov(res.backward.at(grid.start), rowvar=False)
        summary["bw_forward_terminal_to_sigma0"] = bures_wasserstein(fwd_cov, nu0.cov)
        summary["bw_recovered_to_sigma0"] = bures_wasserstein(back_cov, nu0.cov)
        summary["ensemble_file"] = _export(res.backward, args.out, "backward", args.export_paths)
        summary["moments"] = _moments_summary(res.backward, args.out, "backward")
    elif args.kind == "doob":
        end = min(grid.end, 1.0 - ctx.delta)
        dgrid = S.TimeGrid.uniform(grid.start, end, grid.steps)
        x0 = _endpoint(ctx, "x0", "nu0", args.seed, 31)
        x1 = _endpoint(ctx, "x1", "nu1", args.seed, 32)
        record = _snap(dgrid, np.linspace(dgrid.start, dgrid.end, 11)) if not rec else _snap(dgrid, rec)
        ens = S.simulate_doob_bridge(dyn, x0, x1, dgrid, count, args.seed, record=record, threads=args.threads)
        summary["ensemble_file"] = _export(ens, args.out, "doob", args.export_paths)
        summary["moments"] = _moments_summary(ens, args.out, "doob")
        summary["reference_variance"] = [
            {"t": float(t), "variance": np.diag(D.reference_bridge_conditional(dyn, float(t), x0, x1).cov).tolist()}
            for t in ens.times]
    else:
        bridge = _bridge(ctx)
        policies = (S.PolicyPair.zero() if ctx.cfg.get("policies", "optimal") == "zero"
                    else S.optimal_gaussian_policies(bridge, ctx.delta))
        x0 = bridge.nu0.sample(count, np.random.SeedSequence([args.seed, 33]))
        if args.kind == "fb":
            x1 = bridge.nu1.sample(count, np.random.SeedSequence([args.seed, 34]))
            res = S.simulate_fb_tsde(dyn, policies, x0, x1, grid, args.seed, record=record, threads=args.threads)
            for name, ens in (("forward", res.forward), ("backward", res.backward)):
                summary[f"{name}_ensemble_file"] = _export(ens, args.out, name, args.export_paths)
                summary[f"{name}_moments"] = _moments_summary(ens, args.out, name)
        else:
            ens = S.probability_flow(dyn, policies, x0, grid, record=record)
            summary["ensemble_file"] = _export(ens, args.out, "flow", args.export_paths)
            summary["moments"] = _moments_summary(ens, args.out, "flow")
            summary["bw_terminal_to_sigma1"] = bures_wasserstein(np.cov(ens.final, rowvar=False), bridge.nu1.cov)
    _write_json(os.path.join(args.out, "summary.json"), summary)


def _endpoint(ctx: Context, key: str, measure: str, seed: int, stream: int) -> np.ndarray:
    if key in ctx.cfg:
        x = np.asarray(ctx.cfg[key], dtype=float)
        if x.shape != (ctx.op.dim,):
            raise DataError(f"{key} must have length {ctx.op.dim}")
        return x
    return ctx.measure(measure).sample(1, np.random.SeedSequence([seed, stream]))[0]


def _read_samples(path: str, t: float | None) -> np.ndarray:
    """Plain sample CSV with a header row, or an exported ensemble filtered at time ``t``."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if header[:2] != ["path_id", "t"]:
        return data
    times = np.unique(data[:, 1])
    if t is None:
        if len(times) != 1:
            raise UsageError(f"{path} holds several times; pick one with --t")
        t = times[0]
    keep = np.abs(data[:, 1] - t) < 1e-9
    if not keep.any():
        raise DataError(f"{path} has no samples at t={t}")
    return data[keep, 2:]


def cmd_metrics(args) -> None:
    if args.samples_a and args.samples_b:
        a = _read_samples(args.samples_a, args.t)
        b = _read_samples(args.samples_b, args.t)
        method = args.method
        if method == "auto":
            method = "exact" if max(len(a), len(b)) <= EXACT_LIMIT else "sinkhorn"
        report = empirical_wasserstein(a, b, args.p, method, args.epsilon).to_dict()
    elif args.cov_a and args.cov_b:
        ca, cb = _read_matrix(args.cov_a), _read_matrix(args.cov_b)
        n = ca.shape[0]
        ma = _read_matrix(args.mean_a).reshape(-1) if args.mean_a else np.zeros(n)
        mb = _read_matrix(args.mean_b).reshape(-1) if args.mean_b else np.zeros(n)
        na, nb = GaussianMeasure(ma, ca), GaussianMeasure(mb, cb)
        report = {"name": "W2_gaussian", "value": bures_wasserstein(ca, cb, ma, mb)}
        try:
            report["kl_a_b"] = gaussian_kl(na, nb)
        except NumericalError:
            report["kl_a_b"] = None
    else:
        raise UsageError("give --samples-a/--samples-b or --cov-a/--cov-b")
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def cmd_experiment(args) -> None:
    bm = None
    if args.dynamics == "bm":
        bm = {"variant": "tsheat_bm", "c": args.c if args.c is not None else 0.5,
              "g": args.g if args.g is not None else 0.01}
    report = run_synthetic(args.out, args.seed, bm=bm, checks=args.checks)
    for item in report["checks"]:
        status = "PASS" if item["passed"] else "FAIL"
        print(f"[{status}] criterion {item['number']}: {item['name']}")
    if not report["all_passed"]:
        raise NumericalError("one or more acceptance checks failed; see report.json")


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsbridge", description="Gaussian Schrödinger bridges on graphs and simplicial complexes")
    p.add_argument("--seed", type=int, required=True, help="RNG seed (mandatory)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for ensembles")
    p.add_argument("--eps", type=float, default=0.0, help="Laplacian perturbation for singular operators")
    sub = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    topo = sub.add_parser("topology", help="build complexes and spectra")
    tsub = topo.add_subparsers(dest="action", required=True, parser_class=_Parser)
    b = tsub.add_parser("build")
    b.add_argument("--edges")
    b.add_argument("--triangles")
    b.add_argument("--knn", type=int)
    b.add_argument("--points")
    b.add_argument("--metric", default="euclidean", choices=["euclidean", "geodesic_sphere"])
    b.add_argument("--weighted", action="store_true")
    b.add_argument("--out", required=True)
    s = tsub.add_parser("spectrum")
    s.add_argument("--complex", help="complex JSON (default: bundled synthetic graph)")
    s.add_argument("--kind", default="graph", choices=["graph", "hodge_down", "hodge_up", "hodge_full"])
    s.add_argument("--normalization", default="combinatorial",
                   choices=["combinatorial", "symmetric", "rw_symmetrized", "max_eigenvalue_scaled"])
    s.add_argument("--out", required=True)
    s.add_argument("--vectors", help="also write eigenvectors to this CSV")
    topo.set_defaults(func=cmd_topology)

    br = sub.add_parser("bridge", help="solve and query bridges")
    bsub = br.add_subparsers(dest="action", required=True, parser_class=_Parser)
    for name in ("solve", "marginal", "sample"):
        q = bsub.add_parser(name)
        q.add_argument("--config", required=True)
        q.add_argument("--out", required=True)
        if name != "solve":
            q.add_argument("--t", default="0.0:1.0:0.02", help="a:b:step or comma list")
        if name == "sample":
            q.add_argument("--mode", choices=["interpolant", "sde", "conditional"], default="interpolant")
            q.add_argument("--count", type=int)
            q.add_argument("--export-paths", type=int, default=100)
    br.set_defaults(func=cmd_bridge)

    sm = sub.add_parser("sim", help="simulate ensembles")
    sm.add_argument("kind", choices=["em", "reverse-score", "doob", "fb", "flow"])
    sm.add_argument("--config", required=True)
    sm.add_argument("--out", required=True)
    sm.add_argument("--count", type=int)
    sm.add_argument("--export-paths", type=int, default=100)
    sm.set_defaults(func=cmd_sim)

    mt = sub.add_parser("metrics", help="distances between sample sets or Gaussians")
    mt.add_argument("--samples-a")
    mt.add_argument("--samples-b")
    mt.add_argument("--p", type=int, default=2, choices=[1, 2])
    mt.add_argument("--method", default="auto", choices=["auto", "exact", "sinkhorn"],
                    help="auto: exact up to 2000 points per side, Sinkhorn above")
    mt.add_argument("--epsilon", type=float, default=1e-3)
    mt.add_argument("--t", type=float, help="time slice when reading exported ensembles")
    mt.add_argument("--mean-a")
    mt.add_argument("--cov-a")
    mt.add_argument("--mean-b")
    mt.add_argument("--cov-b")
    mt.add_argument("--out")
    mt.set_defaults(func=cmd_metrics)

    ex = sub.add_parser("experiment", help="scripted reproductions")
    esub = ex.add_subparsers(dest="name", required=True, parser_class=_Parser)
    syn = esub.add_parser("synthetic")
    syn.add_argument("--out", required=True)
    syn.add_argument("--dynamics", choices=["bm", "ve"], default="bm")
    syn.add_argument("--c", type=float)
    syn.add_argument("--g", type=float)
    syn.add_argument("--checks", choices=["all", "quick"], default="all")
    ex.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"tsbridge: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"tsbridge: numerical error: {exc} (for singular operators retry with --eps 1e-6)",
              file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"tsbridge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
