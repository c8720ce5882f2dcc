"""Dense graph containers, JSONL I/O, synthetic grouped graphs and k-fold splits."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Dataset",
    "SyntheticSpec",
    "SchemaError",
    "load_jsonl",
    "save_jsonl",
    "graph_to_json",
    "graph_from_record",
    "synthetic_graph",
    "generate_synthetic",
    "kfold_indices",
    "kfold_split",
    "filter_by_size",
    "permute_graph",
]

TASKS = ("regression", "classification")


class SchemaError(ValueError):
    """A JSONL record does not follow the graph schema."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = f"line {line}: " if line is not None else ""
        what = f"field '{field}': " if field else ""
        super().__init__(where + what + message)
        self.line = line
        self.field = field


@dataclass
class Graph:
    """Undirected graph with dense node features, edge features and adjacency."""

    node_features: np.ndarray
    edge_features: np.ndarray
    adjacency: np.ndarray
    label: float | None = None

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.edge_features = np.asarray(self.edge_features, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.validate()

    @property
    def n(self) -> int:
        return self.node_features.shape[0]

    @property
    def d_n(self) -> int:
        return self.node_features.shape[1]

    @property
    def d_e(self) -> int:
        return self.edge_features.shape[2]

    def validate(self) -> None:
        x, e, a = self.node_features, self.edge_features, self.adjacency
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"node_features must be n x d_n with n, d_n >= 1, got {x.shape}")
        n = x.shape[0]
        if e.ndim != 3 or e.shape[:2] != (n, n) or e.shape[2] < 1:
            raise ValueError(f"edge_features must be {n} x {n} x d_e, got {e.shape}")
        if a.shape != (n, n):
            raise ValueError(f"adjacency must be {n} x {n}, got {a.shape}")
        if not np.all((a == 0) | (a == 1)):
            raise ValueError("adjacency entries must be 0 or 1")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise ValueError("adjacency must have a zero diagonal")
        if np.any(e[a == 0] != 0):
            raise ValueError("edge features must vanish where there is no edge")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(e))):
            raise ValueError("features must be finite")

    def edge_list(self) -> list[tuple[int, int]]:
        """Undirected edges as ``(i, j)`` with ``i < j``, in row-major order."""
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(i.tolist(), j.tolist()))

    def directed_edges(self) -> np.ndarray:
        """All directed edges ``(src, dst)`` in row-major order, shape (m, 2)."""
        return np.argwhere(self.adjacency == 1)


@dataclass
class Dataset:
    graphs: list[Graph]
    task: str = "regression"
    d_n: int | None = None
    d_e: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        self.graphs = list(self.graphs)
        if self.graphs:
            if self.d_n is None:
                self.d_n = self.graphs[0].d_n
            if self.d_e is None:
                self.d_e = self.graphs[0].d_e
        for k, g in enumerate(self.graphs):
            if g.d_n != self.d_n or g.d_e != self.d_e:
                raise ValueError(f"graph {k} has dims ({g.d_n}, {g.d_e}), expected ({self.d_n}, {self.d_e})")
            if g.label is None:
                raise ValueError(f"graph {k} has no label")
            if self.task == "classification" and g.label not in (0.0, 1.0):
                raise ValueError(f"graph {k} label {g.label} is not 0/1")

    def __len__(self) -> int:
        return len(self.graphs)

    def __getitem__(self, idx):
        return self.graphs[idx]

    def __iter__(self):
        return iter(self.graphs)

    def subset(self, indices: Iterable[int]) -> Dataset:
        return Dataset([self.graphs[i] for i in indices], self.task, self.d_n, self.d_e)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.float64)


# ---------------------------------------------------------------------------
# JSONL


def _fmt(x: float) -> str:
    s = format(float(x), ".17g")
    if s in ("nan", "inf", "-inf"):
        raise ValueError("cannot serialise non-finite value")
    return s


def _vec(v: Sequence[float]) -> str:
    return "[" + ",".join(_fmt(x) for x in v) + "]"


def graph_to_json(g: Graph) -> str:
    """One-line JSON record with reals printed to 17 significant digits."""
    nodes = "[" + ",".join(_vec(row) for row in g.node_features) + "]"
    edges = "[" + ",".join(f"[{i},{j},{_vec(g.edge_features[i, j])}]" for i, j in g.edge_list()) + "]"
    label = "null" if g.label is None else _fmt(g.label)
    return f'{{"nodes":{nodes},"edges":{edges},"label":{label}}}'


def _real_list(obj, line, name) -> list[float]:
    if not isinstance(obj, list) or not obj:
        raise SchemaError("expected a non-empty list of numbers", line, name)
    for x in obj:
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise SchemaError(f"non-numeric entry {x!r}", line, name)
    return [float(x) for x in obj]


def graph_from_record(rec, line: int | None = None, d_e: int | None = None) -> Graph:
    """Build a :class:`Graph` from a decoded JSONL record.

    Edges are undirected: ``[i, j, f]`` fills both ``(i, j)`` and ``(j, i)``.
    ``d_e`` is needed only for edge-less graphs (defaults to 1).
    """
    if not isinstance(rec, dict):
        raise SchemaError("record must be a JSON object", line)
    for key in ("nodes", "edges"):
        if key not in rec:
            raise SchemaError("missing", line, key)
    nodes = rec["nodes"]
    if not isinstance(nodes, list) or not nodes:
        raise SchemaError("expected at least one node", line, "nodes")
    rows = [_real_list(r, line, "nodes") for r in nodes]
    if len({len(r) for r in rows}) != 1:
        raise SchemaError("rows have different lengths", line, "nodes")
    x = np.array(rows)
    n = x.shape[0]
    edges = rec["edges"]
    if not isinstance(edges, list):
        raise SchemaError("expected a list", line, "edges")
    parsed = []
    for item in edges:
        if not (isinstance(item, list) and len(item) == 3):
            raise SchemaError("each edge must be [i, j, [features]]", line, "edges")
        i, j, f = item
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in (i, j)):
            raise SchemaError("edge endpoints must be integers", line, "edges")
        if not (0 <= i < n and 0 <= j < n):
            raise SchemaError(f"edge ({i}, {j}) out of range for {n} nodes", line, "edges")
        if i == j:
            raise SchemaError(f"self-loop at node {i}", line, "edges")
        parsed.append((i, j, _real_list(f, line, "edges")))
    widths = {len(f) for _, _, f in parsed}
    if len(widths) > 1:
        raise SchemaError("edge feature vectors have different lengths", line, "edges")
    width = widths.pop() if widths else (d_e or 1)
    e = np.zeros((n, n, width))
    a = np.zeros((n, n))
    for i, j, f in parsed:
        if a[i, j] and not np.array_equal(e[i, j], f):
            raise SchemaError(f"conflicting duplicate edge ({i}, {j})", line, "edges")
        a[i, j] = a[j, i] = 1.0
        e[i, j] = e[j, i] = f
    label = rec.get("label")
    if label is not None and (isinstance(label, bool) or not isinstance(label, (int, float))):
        raise SchemaError(f"label must be a number, got {label!r}", line, "label")
    try:
        return Graph(x, e, a, None if label is None else float(label))
    except ValueError as exc:
        raise SchemaError(str(exc), line) from exc


def load_jsonl(path: str | os.PathLike, task: str = "regression") -> Dataset:
    """Read one graph per line; every graph is validated on the way in."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such data file: {path}")
    graphs: list[Graph] = []
    pending: list[tuple[int, dict]] = []
    d_n = d_e = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", lineno) from exc
            pending.append((lineno, rec))
    # edge width may only be known from a later line, so resolve it first
    for lineno, rec in pending:
        if isinstance(rec, dict) and rec.get("edges"):
            first = rec["edges"][0]
            if isinstance(first, list) and len(first) == 3 and isinstance(first[2], list):
                d_e = len(first[2])
                break
    for lineno, rec in pending:
        g = graph_from_record(rec, lineno, d_e)
        if g.label is None:
            raise SchemaError("missing", lineno, "label")
        if task == "classification" and g.label not in (0.0, 1.0):
            raise SchemaError(f"classification label must be 0 or 1, got {g.label}", lineno, "label")
        if d_n is None:
            d_n = g.d_n
        if g.d_n != d_n:
            raise SchemaError(f"node feature width {g.d_n} differs from {d_n}", lineno, "nodes")
        if d_e is not None and g.d_e != d_e:
            raise SchemaError(f"edge feature width {g.d_e} differs from {d_e}", lineno, "edges")
        graphs.append(g)
    return Dataset(graphs, task, d_n, d_e)


def save_jsonl(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in ds.graphs:
            fh.write(graph_to_json(g))
            fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for graphs made of dense node groups joined by a few bridges.

    ``group_count`` is the number of groups per graph; when
    ``min_group_count`` is set, each graph draws its group count uniformly
    from ``[min_group_count, group_count]``.
    """

    group_count: int = 3
    group_size_range: tuple[int, int] = (3, 5)
    inter_group_edges: int = 1
    feature_noise: float = 0.1
    target_rule: str = "group_count"
    seed: int = 0
    count: int = 100
    d_n: int = 4
    d_e: int = 2
    min_group_count: int | None = None

    def validate(self) -> None:
        kmin, kmax = self.group_size_range
        if self.group_count < 1:
            raise ValueError("group_count must be >= 1")
        if self.min_group_count is not None and not 1 <= self.min_group_count <= self.group_count:
            raise ValueError("min_group_count must lie in [1, group_count]")
        if not 1 <= kmin <= kmax:
            raise ValueError("group_size_range must satisfy 1 <= k_min <= k_max")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be >= 0")
        if self.inter_group_edges < 0:
            raise ValueError("inter_group_edges must be >= 0")
        if self.target_rule not in ("group_count", "group_feature_sum"):
            raise ValueError(f"unknown target_rule {self.target_rule!r}")
        if self.count < 0 or self.d_n < 1 or self.d_e < 1:
            raise ValueError("count must be >= 0 and feature widths >= 1")


def synthetic_graph(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[Graph, np.ndarray, np.ndarray]:
    """Draw one grouped graph.

    Returns ``(graph, membership, intra_adjacency)`` where ``membership[i]`` is
    the group of node ``i`` and ``intra_adjacency`` is the adjacency before
    bridges were added.
    """
    lo = spec.min_group_count if spec.min_group_count is not None else spec.group_count
    g = int(rng.integers(lo, spec.group_count + 1))
    kmin, kmax = spec.group_size_range
    sizes = rng.integers(kmin, kmax + 1, size=g)
    membership = np.repeat(np.arange(g), sizes)
    n = membership.size
    means = rng.normal(size=(g, spec.d_n))
    x = means[membership] + spec.feature_noise * rng.normal(size=(n, spec.d_n))

    same = membership[:, None] == membership[None, :]
    intra = (same & ~np.eye(n, dtype=bool)).astype(np.float64)
    a = intra.copy()
    # intra-group edges carry e_0, bridges carry e_1 (when d_e > 1)
    e = np.zeros((n, n, spec.d_e))
    e[intra == 1, 0] = 1.0
    starts = np.concatenate([[0], np.cumsum(sizes)])
    bridge_channel = 1 if spec.d_e > 1 else 0
    for p in range(g):
        for q in range(p + 1, g):
            for _ in range(spec.inter_group_edges):
                i = int(rng.integers(starts[p], starts[p + 1]))
                j = int(rng.integers(starts[q], starts[q + 1]))
                a[i, j] = a[j, i] = 1.0
                e[i, j, bridge_channel] = e[j, i, bridge_channel] = 1.0

    if spec.target_rule == "group_count":
        label = float(g)
    else:
        label = float(means.sum())
    return Graph(x, e, a, label), membership, intra


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic dataset of ``spec.count`` grouped graphs."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    graphs = [synthetic_graph(spec, rng)[0] for _ in range(spec.count)]
    return Dataset(graphs, "regression", spec.d_n, spec.d_e)


# ---------------------------------------------------------------------------
# splitting and filtering


def kfold_indices(
    size: int, folds: int = 5, test_fraction: float = 0.10, seed: int = 0
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Uniformly sampled test indices plus ``folds`` disjoint validation folds."""
    if folds < 2:
        raise ValueError("need at least two folds")
    if size < folds + 1:
        raise ValueError(f"dataset of {size} graphs is too small for {folds} folds plus a test set")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    perm = np.random.default_rng(seed).permutation(size)
    n_test = min(int(round(test_fraction * size)), size - folds)
    test = np.sort(perm[:n_test])
    rest = perm[n_test:]
    return test, [np.sort(f) for f in np.array_split(rest, folds)]


def kfold_split(
    ds: Dataset, folds: int = 5, test_fraction: float = 0.10, seed: int = 0
) -> tuple[Dataset, list[tuple[Dataset, Dataset]]]:
    test, valid_folds = kfold_indices(len(ds), folds, test_fraction, seed)
    out = []
    for k, valid in enumerate(valid_folds):
        train = np.sort(np.concatenate([f for j, f in enumerate(valid_folds) if j != k]))
        out.append((ds.subset(train), ds.subset(valid)))
    return ds.subset(test), out


def filter_by_size(ds: Dataset, min_nodes: int | None = None, max_nodes: int | None = None) -> Dataset:
    keep = [
        g
        for g in ds.graphs
        if (min_nodes is None or g.n >= min_nodes) and (max_nodes is None or g.n <= max_nodes)
    ]
    return Dataset(keep, ds.task, ds.d_n, ds.d_e)


def permute_graph(g: Graph, perm: Sequence[int]) -> Graph:
    """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
    p = np.asarray(perm)
    return Graph(
        g.node_features[p],
        g.edge_features[np.ix_(p, p)],
        g.adjacency[np.ix_(p, p)],
        g.label,
    )
