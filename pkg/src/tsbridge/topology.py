"""Graphs and simplicial 2-complexes, incidence matrices and Laplacians.

Edges and triangles carry the reference orientation given by increasing node
labels. Weights enter as diagonal scalings of the incidence matrices,

    B1w = W0^{-1/2} B1 W1^{1/2},    B2w = W1^{-1/2} B2,

so that every Laplacian built from them stays symmetric positive
semi-definite and ``B1w @ B2w == 0`` still holds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .errors import (
    DanglingTriangle,
    DataError,
    DegeneratePoints,
    DuplicateSimplex,
    IncompatibleKind,
    InvalidIndex,
)

LAPLACIAN_KINDS = ("graph", "hodge_down", "hodge_up", "hodge_full")
NORMALIZATIONS = (
    "combinatorial",
    "symmetric",
    "random_walk_symmetrized",
    "max_eigenvalue_scaled",
)

# eigenvalues below this (relative to the spectral radius) count as zero
_SINGULAR_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SimplicialComplex2:
    """An oriented simplicial 2-complex (a graph when there are no triangles).

    Attributes
    ----------
    num_nodes : int
    edges : (n1, 2) int array, each row ``i < j``
    triangles : (n2, 3) int array, each row ``i < j < k``
    edge_weights, node_weights : optional positive float arrays
    """

    num_nodes: int
    edges: np.ndarray
    triangles: np.ndarray
    edge_weights: np.ndarray | None = None
    node_weights: np.ndarray | None = None
    _edge_index: dict = field(default_factory=dict, repr=False)

    @property
    def n0(self) -> int:
        return self.num_nodes

    @property
    def n1(self) -> int:
        return len(self.edges)

    @property
    def n2(self) -> int:
        return len(self.triangles)

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.n0, self.n1, self.n2

    def edge_id(self, i: int, j: int) -> int:
        """Index of edge ``{i, j}`` (orientation ignored)."""
        return self._edge_index[(min(i, j), max(i, j))]

    def to_dict(self) -> dict:
        out = {
            "num_nodes": int(self.num_nodes),
            "edges": self.edges.tolist(),
            "triangles": self.triangles.tolist(),
        }
        if self.edge_weights is not None:
            out["edge_weights"] = self.edge_weights.tolist()
        if self.node_weights is not None:
            out["node_weights"] = self.node_weights.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SimplicialComplex2":
        try:
            return build_complex(
                data["edges"],
                data.get("triangles", []),
                edge_weights=data.get("edge_weights"),
                node_weights=data.get("node_weights"),
                num_nodes=data["num_nodes"],
            )
        except KeyError as exc:
            raise DataError(f"complex JSON is missing field {exc}") from None


@dataclass(frozen=True)
class IncidenceMatrices:
    b1: np.ndarray
    b2: np.ndarray


@dataclass(frozen=True)
class LaplacianSpec:
    kind: str = "graph"
    normalization: str = "combinatorial"
    perturbation: float = 0.0

    def __post_init__(self):
        if self.normalization == "rw_symmetrized":
            object.__setattr__(self, "normalization", "random_walk_symmetrized")
        if self.kind not in LAPLACIAN_KINDS:
            raise IncompatibleKind(f"unknown Laplacian kind {self.kind!r}")
        if self.normalization not in NORMALIZATIONS:
            raise IncompatibleKind(f"unknown normalization {self.normalization!r}")
        if self.perturbation < 0:
            raise DataError("perturbation must be nonnegative")


def _positive_weights(w, size, what):
    if w is None:
        return None
    w = np.asarray(w, dtype=float)
    if w.shape != (size,):
        raise DataError(f"{what} must have length {size}, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise DataError(f"{what} must be strictly positive")
    return w


def build_complex(
    edge_list: Iterable[Sequence[int]],
    triangle_list: Iterable[Sequence[int]] = (),
    edge_weights=None,
    node_weights=None,
    num_nodes: int | None = None,
) -> SimplicialComplex2:
    """Build a complex, putting every simplex in reference orientation.

    Edge order is preserved so that signal files stay aligned with the edge
    list they came from; use :func:`edge_orientation_signs` to re-orient
    flows given on oppositely presented edges.
    """
    edges = []
    for e in edge_list:
        if len(e) != 2:
            raise DataError(f"edge {e!r} does not have two endpoints")
        i, j = int(e[0]), int(e[1])
        if i < 0 or j < 0:
            raise InvalidIndex(f"negative node index in edge {e!r}")
        if i == j:
            raise InvalidIndex(f"self-loop at node {i}")
        edges.append((min(i, j), max(i, j)))
    tris = []
    for t in triangle_list:
        if len(t) != 3:
            raise DataError(f"triangle {t!r} does not have three vertices")
        tt = tuple(sorted(int(v) for v in t))
        if tt[0] < 0:
            raise InvalidIndex(f"negative node index in triangle {t!r}")
        if len(set(tt)) != 3:
            raise InvalidIndex(f"triangle {t!r} has repeated vertices")
        tris.append(tt)

    max_index = max([v for e in edges for v in e] + [v for t in tris for v in t], default=-1)
    if num_nodes is None:
        num_nodes = max_index + 1
    num_nodes = int(num_nodes)
    if max_index >= num_nodes:
        raise InvalidIndex(f"node index {max_index} out of range for {num_nodes} nodes")

    index = {}
    for k, e in enumerate(edges):
        if e in index:
            raise DuplicateSimplex(f"duplicate edge {list(e)}")
        index[e] = k
    seen = set()
    for t in tris:
        if t in seen:
            raise DuplicateSimplex(f"duplicate triangle {list(t)}")
        seen.add(t)
        i, j, k = t
        for e in ((i, j), (i, k), (j, k)):
            if e not in index:
                raise DanglingTriangle(f"triangle {list(t)} has no boundary edge {list(e)}")

    return SimplicialComplex2(
        num_nodes=num_nodes,
        edges=np.array(edges, dtype=int).reshape(-1, 2),
        triangles=np.array(tris, dtype=int).reshape(-1, 3),
        edge_weights=_positive_weights(edge_weights, len(edges), "edge_weights"),
        node_weights=_positive_weights(node_weights, num_nodes, "node_weights"),
        _edge_index=index,
    )


def edge_orientation_signs(edge_list: Iterable[Sequence[int]]) -> np.ndarray:
    """+1 for edges given as ``[i, j]`` with ``i < j``, -1 otherwise.

    Multiplying a flow given on the raw edge list by these signs expresses it
    in reference orientation.
    """
    return np.array([1.0 if int(e[0]) < int(e[1]) else -1.0 for e in edge_list])


def incidence(complex_: SimplicialComplex2) -> IncidenceMatrices:
    """Unweighted signed incidence matrices ``B1`` (n0 x n1) and ``B2`` (n1 x n2)."""
    n0, n1, n2 = complex_.counts
    b1 = np.zeros((n0, n1))
    cols = np.arange(n1)
    b1[complex_.edges[:, 0], cols] = -1.0
    b1[complex_.edges[:, 1], cols] = 1.0
    b2 = np.zeros((n1, n2))
    for t, (i, j, k) in enumerate(complex_.triangles):
        # boundary of [i,j,k] = [j,k] - [i,k] + [i,j]
        b2[complex_.edge_id(i, j), t] = 1.0
        b2[complex_.edge_id(j, k), t] = 1.0
        b2[complex_.edge_id(i, k), t] = -1.0
    return IncidenceMatrices(b1, b2)


def weighted_incidence(complex_: SimplicialComplex2) -> IncidenceMatrices:
    inc = incidence(complex_)
    b1, b2 = inc.b1, inc.b2
    if complex_.edge_weights is not None:
        sw = np.sqrt(complex_.edge_weights)
        b1 = b1 * sw[None, :]
        b2 = b2 / sw[:, None]
    if complex_.node_weights is not None:
        b1 = b1 / np.sqrt(complex_.node_weights)[:, None]
    return IncidenceMatrices(b1, b2)


def _symmetrize(m):
    return 0.5 * (m + m.T)


def laplacian(complex_: SimplicialComplex2, spec: LaplacianSpec | None = None, **kwargs) -> np.ndarray:
    """Dense Laplacian of the requested kind.

    ``laplacian(cx, kind="hodge_full")`` is shorthand for passing a
    :class:`LaplacianSpec`.
    """
    spec = spec or LaplacianSpec(**kwargs)
    inc = weighted_incidence(complex_)
    if spec.kind == "graph":
        lap = inc.b1 @ inc.b1.T
    else:
        if complex_.n1 == 0:
            raise IncompatibleKind(f"{spec.kind} needs at least one edge")
        lap_down = inc.b1.T @ inc.b1
        lap_up = inc.b2 @ inc.b2.T
        lap = {"hodge_down": lap_down, "hodge_up": lap_up, "hodge_full": lap_down + lap_up}[spec.kind]
    lap = _symmetrize(lap)

    if spec.normalization in ("symmetric", "random_walk_symmetrized"):
        if spec.kind != "graph":
            raise IncompatibleKind(f"{spec.normalization} normalization is only defined for graph Laplacians")
        # D^{-1} L is similar to D^{-1/2} L D^{-1/2}; both variants use the latter
        deg = np.diag(lap).copy()
        inv_sqrt = np.zeros_like(deg)
        inv_sqrt[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
        lap = _symmetrize(inv_sqrt[:, None] * lap * inv_sqrt[None, :])
    elif spec.normalization == "max_eigenvalue_scaled":
        lam_max = np.linalg.eigvalsh(lap)[-1] if lap.size else 0.0
        if lam_max > 0:
            lap = lap / lam_max

    if spec.perturbation > 0 and lap.size:
        evals = np.linalg.eigvalsh(lap)
        if evals[0] <= _SINGULAR_TOL * max(1.0, abs(evals[-1])):
            lap = lap + spec.perturbation * np.eye(len(lap))
    return lap


def _projector_onto_range(a: np.ndarray, dim: int) -> np.ndarray:
    if a.size == 0:
        return np.zeros((dim, dim))
    q = linalg.orth(a)
    return _symmetrize(q @ q.T)


def hodge_projectors(complex_: SimplicialComplex2) -> dict[str, np.ndarray]:
    """Orthogonal projectors onto the gradient, curl and harmonic edge subspaces."""
    inc = weighted_incidence(complex_)
    n1 = complex_.n1
    grad = _projector_onto_range(inc.b1.T, n1)
    curl = _projector_onto_range(inc.b2, n1)
    harmonic = _symmetrize(np.eye(n1) - grad - curl)
    return {"gradient": grad, "curl": curl, "harmonic": harmonic}


def hodge_decomposition(complex_: SimplicialComplex2, flow) -> dict[str, np.ndarray]:
    flow = np.asarray(flow, dtype=float)
    return {name: p @ flow for name, p in hodge_projectors(complex_).items()}


def knn_graph(points, k: int, metric: str = "euclidean", weighted: bool = False) -> SimplicialComplex2:
    """Symmetrized k-nearest-neighbour graph.

    ``geodesic_sphere`` treats each point as a direction on the unit sphere;
    chordal and great-circle distance order neighbours identically, so the
    search runs on normalized coordinates and only the weights use arc length.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise DataError("points must be a 2-D array")
    n = len(pts)
    if not 1 <= k < n:
        raise DataError(f"k must satisfy 1 <= k < {n}, got {k}")
    if metric == "geodesic_sphere":
        norms = np.linalg.norm(pts, axis=1)
        if np.any(norms == 0):
            raise DegeneratePoints("zero vector cannot be placed on the sphere")
        pts = pts / norms[:, None]
    elif metric != "euclidean":
        raise DataError(f"unknown metric {metric!r}")

    tree = cKDTree(pts)
    dist, nbr = tree.query(pts, k=k + 1)
    pairs = {}
    for i in range(n):
        # drop self; ties with coincident points may put i at another slot
        cand = [(d, j) for d, j in zip(dist[i], nbr[i]) if j != i][:k]
        for d, j in cand:
            key = (min(i, j), max(i, j))
            pairs[key] = d
    keys = sorted(pairs)
    weights = None
    if weighted:
        d = np.array([pairs[key] for key in keys])
        if metric == "geodesic_sphere":
            d = 2.0 * np.arcsin(np.clip(d / 2.0, 0.0, 1.0))
        if np.any(d <= 0):
            raise DegeneratePoints("coincident points give zero distance")
        weights = 1.0 / d
    return build_complex(keys, (), edge_weights=weights, num_nodes=n)


# -- file formats -----------------------------------------------------------

def _read_int_rows(path, width, header_names, allow_extra_float=False):
    rows, extra = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            row = [c.strip() for c in row]
            if not row or all(c == "" for c in row):
                continue
            if lineno == 1 and row[0] in header_names:
                continue
            try:
                if len(row) == width:
                    rows.append([int(c) for c in row])
                elif allow_extra_float and len(row) == width + 1:
                    rows.append([int(c) for c in row[:width]])
                    extra.append(float(row[width]))
                else:
                    raise ValueError(f"expected {width} columns, got {len(row)}")
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    if extra and len(extra) != len(rows):
        raise DataError(f"{path}: weight column must be present on every row or none")
    return rows, (extra or None)


def read_edge_csv(path) -> tuple[list[list[int]], list[float] | None]:
    """Read ``tail,head[,weight]`` rows (header optional, 0-based indices)."""
    return _read_int_rows(path, 2, {"tail"}, allow_extra_float=True)


def read_triangle_csv(path) -> list[list[int]]:
    rows, _ = _read_int_rows(path, 3, {"a"})
    return rows


def write_edge_csv(path, complex_: SimplicialComplex2) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if complex_.edge_weights is None:
            w.writerow(["tail", "head"])
            w.writerows(complex_.edges.tolist())
        else:
            w.writerow(["tail", "head", "weight"])
            for (i, j), wt in zip(complex_.edges.tolist(), complex_.edge_weights):
                w.writerow([i, j, f"{wt:.17g}"])


def save_complex(path, complex_: SimplicialComplex2) -> None:
    Path(path).write_text(json.dumps(complex_.to_dict()))


def load_complex(path) -> SimplicialComplex2:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None
    return SimplicialComplex2.from_dict(data)


def connected_components(complex_: SimplicialComplex2) -> int:
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components as cc

    n = complex_.num_nodes
    e = complex_.edges
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    return int(cc(adj, directed=False)[0])
