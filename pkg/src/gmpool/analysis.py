"""Spectral analysis of learned grouping matrices and heatmap export."""

from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph_data import Dataset
from .linalg import sym_eig
from .pooling import effective_clusters

__all__ = [
    "DEFAULT_THRESHOLDS",
    "ClusterHistogram",
    "grouping_matrices",
    "histogram",
    "export_heatmap",
    "read_matrix_csv",
    "write_matrix_csv",
    "cluster_report",
]

DEFAULT_THRESHOLDS = (0.25, 0.5, 0.75, 1.0)


@dataclass
class ClusterHistogram:
    """Effective cluster counts per graph, for several eigenvalue thresholds.

    ``counts_per_graph[k][i]`` is the count of graph ``i`` at
    ``thresholds[k]``; ``bins[t]`` maps a count to its frequency.
    """

    thresholds: list[float]
    counts_per_graph: list[list[int]]
    bins: dict[float, dict[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.bins:
            self.bins = {
                t: dict(sorted(Counter(c).items())) for t, c in zip(self.thresholds, self.counts_per_graph)
            }

    def mode(self, threshold: float) -> int:
        """Most frequent count at ``threshold`` (smallest count on ties)."""
        b = self.bins[threshold]
        top = max(b.values())
        return min(k for k, v in b.items() if v == top)

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "counts_per_graph": [list(map(int, c)) for c in self.counts_per_graph],
            "bins": {format(t, "g"): {str(k): v for k, v in b.items()} for t, b in self.bins.items()},
        }


def grouping_matrices(ds: Dataset | Sequence, model) -> list[np.ndarray]:
    """Eval-mode grouping matrix of every graph."""
    graphs = ds.graphs if isinstance(ds, Dataset) else list(ds)
    return [model.grouping(g).values for g in graphs]


def histogram(ds: Dataset | Sequence, model, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> ClusterHistogram:
    graphs = ds.graphs if isinstance(ds, Dataset) else list(ds)
    if not graphs:
        raise ValueError("cannot build a histogram of an empty dataset")
    thresholds = sorted(float(t) for t in thresholds)
    spectra = [sym_eig(m) for m in grouping_matrices(graphs, model)]
    counts = [[effective_clusters(e, t) for e in spectra] for t in thresholds]
    return ClusterHistogram(thresholds, counts)


def write_matrix_csv(m, path: str | os.PathLike) -> None:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in m:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def read_matrix_csv(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        rows = [line.strip() for line in fh if line.strip()]
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    try:
        data = [[float(v) for v in r.split(",")] for r in rows]
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc
    if len({len(r) for r in data}) != 1:
        raise ValueError(f"{path}: rows have different lengths")
    return np.array(data, dtype=np.float64)


def export_heatmap(m, path: str | os.PathLike, fmt: str = "csv") -> None:
    """Write a grouping matrix as CSV reals or as an 8-bit binary PGM."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("heatmap needs a 2-d matrix")
    if fmt == "csv":
        write_matrix_csv(m, path)
    elif fmt == "pgm":
        rows, cols = m.shape
        pix = np.rint(255.0 * np.clip(m, 0.0, 1.0)).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
            fh.write(pix.tobytes())
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}")


def cluster_report(ds: Dataset | Sequence, model, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> dict:
    """Mean and median effective clusters per threshold against graph size."""
    graphs = ds.graphs if isinstance(ds, Dataset) else list(ds)
    sizes = np.array([g.n for g in graphs], dtype=np.float64)
    mean_n = float(sizes.mean()) if sizes.size else float("nan")
    report = {
        "graphs": len(graphs),
        "mean_nodes": mean_n,
        "median_nodes": float(np.median(sizes)) if sizes.size else float("nan"),
        "thresholds": {},
    }
    if not graphs or not thresholds:
        return report
    hist = histogram(graphs, model, thresholds)
    for t, counts in zip(hist.thresholds, hist.counts_per_graph):
        c = np.asarray(counts, dtype=np.float64)
        report["thresholds"][format(t, "g")] = {
            "mean_clusters": float(c.mean()),
            "median_clusters": float(np.median(c)),
            "mode_clusters": hist.mode(t),
            "ratio_to_mean_nodes": float(c.mean() / mean_n),
        }
    return report
