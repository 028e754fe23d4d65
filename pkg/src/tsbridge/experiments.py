"""Bundled synthetic graph and the graph-GP matching setup built on it."""

from __future__ import annotations

import csv
import io
import json
import os
from importlib import resources

import numpy as np

from . import dynamics as dyn_mod
from .gp import GPKernelSpec, gp_covariance
from .gtsb import GTSBridge, conditional_given_endpoint, marginal
from .measures import GaussianMeasure
from .metrics import bures_wasserstein
from .spectral import SpectralOperator, eigendecompose
from .topology import LaplacianSpec, SimplicialComplex2, build_complex, laplacian

SIGMA0_SPEC = GPKernelSpec("power", exponent=1.5, shift=1.0)
SIGMA1_SPEC = GPKernelSpec("diffusion", exponent=20.0)
BM_PARAMS = {"variant": "tsheat_bm", "c": 0.5, "g": 0.01}
VE_PARAMS = {"variant": "tsheat_ve", "sigma_min": 0.01, "sigma_max": 1.0}


def _data_text(name: str) -> str:
    return resources.files("tsbridge").joinpath("data").joinpath(name).read_text()


def synthetic_graph() -> SimplicialComplex2:
    """The bundled 30-node, 67-edge graph."""
    rows = list(csv.DictReader(io.StringIO(_data_text("synthetic_graph.csv"))))
    return build_complex([[int(r["tail"]), int(r["head"])] for r in rows], num_nodes=30)


def synthetic_points() -> np.ndarray:
    rows = list(csv.DictReader(io.StringIO(_data_text("synthetic_points.csv"))))
    return np.array([[float(r["x"]), float(r["y"])] for r in rows])


def synthetic_operator(normalization: str = "combinatorial") -> SpectralOperator:
    return eigendecompose(laplacian(synthetic_graph(), LaplacianSpec("graph", normalization)))


def synthetic_endpoints(op: SpectralOperator):
    """Zero-mean Matérn-type ``(I + L)^{-1.5}`` and diffusion ``exp(-20 L)`` endpoints."""
    n = op.dim
    return (GaussianMeasure(np.zeros(n), gp_covariance(SIGMA0_SPEC, op)),
            GaussianMeasure(np.zeros(n), gp_covariance(SIGMA1_SPEC, op)))


def synthetic_bridges(op: SpectralOperator | None = None, bm: dict | None = None,
                      ve_cs=(0.01, 10.0)) -> dict[str, GTSBridge]:
    """Bridges for the BM reference and one VE reference per ``c`` in ``ve_cs``."""
    op = op or synthetic_operator()
    nu0, nu1 = synthetic_endpoints(op)
    out = {"bm": GTSBridge(dyn_mod.from_config(bm or BM_PARAMS, op), nu0, nu1)}
    for c in ve_cs:
        out[f"ve_c{c:g}"] = GTSBridge(dyn_mod.from_config({**VE_PARAMS, "c": c}, op), nu0, nu1)
    return out


def bw_curve(bridge: GTSBridge, times) -> np.ndarray:
    """``BW(Sigma_t, Sigma_1)`` along ``times``."""
    return np.array([bures_wasserstein(marginal(bridge, t).measure.cov, bridge.nu1.cov) for t in times])


def fan_chart(bridge: GTSBridge, x0, times, node: int, quantiles=(0.05, 0.25, 0.5, 0.75, 0.95)):
    """Quantiles of ``X_t[node] | X_0 = x0`` along ``times`` (rows: time, quantiles...)."""
    from scipy.stats import norm

    z = norm.ppf(quantiles)
    rows = []
    for t in times:
        law = conditional_given_endpoint(bridge, t, x0=x0)
        sd = np.sqrt(max(law.cov[node, node], 0.0))
        rows.append([t, *(law.mean[node] + z * sd)])
    return np.array(rows)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["%.17g" % float(v) for v in row])


def run_synthetic(outdir, seed: int, bm: dict | None = None, ve_cs=(0.01, 10.0),
                  checks: str = "all", times=None) -> dict:
    """Write BW curves, conditional fan-chart data and an acceptance report to ``outdir``."""
    from . import checks as checks_mod

    os.makedirs(outdir, exist_ok=True)
    times = np.round(np.linspace(0.0, 1.0, 51), 12) if times is None else np.asarray(times)
    op = synthetic_operator()
    bridges = synthetic_bridges(op, bm, ve_cs)
    curves = {name: bw_curve(b, times) for name, b in bridges.items()}
    names = list(curves)
    write_csv(os.path.join(outdir, "bw_curves.csv"), ["t", *names],
              np.column_stack([times, *[curves[k] for k in names]]))
    x0 = bridges["bm"].nu0.sample(1, seed)[0]
    for name, b in bridges.items():
        write_csv(os.path.join(outdir, f"fan_{name}.csv"), ["t", "q05", "q25", "q50", "q75", "q95"],
                  fan_chart(b, x0, times, node=0))
    results = checks_mod.run(seed, checks)
    report = {
        "seed": seed,
        "bridges": {k: {"bw_final": float(curves[k][-1]), "bw_initial": float(curves[k][0])} for k in names},
        "checks": [r.to_dict() for r in results],
        "all_passed": all(r.passed for r in results),
    }
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report
