"""Directed message passing (DMPNN) encoder and graph readouts.

Directed edge ``(i, j)`` carries hidden state ``h_ij``.  Per step::

    m_ij = sum_{k in N(i), k != j} h_ki
    h_ij <- ReLU(h0_ij + W_e m_ij)

and node states are ``ReLU(W_n [X_i, sum_j h_ij] + b_n)``.  Edge states are
stored as a dense (m x hidden) matrix in row-major order of ``(src, dst)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph_data import Graph

__all__ = [
    "DmpnnConfig",
    "DmpnnParams",
    "DenseParams",
    "DmpnnOutput",
    "GraphIndex",
    "graph_index",
    "init_linear",
    "init_edge_states",
    "message_step",
    "node_update",
    "forward",
    "dense_forward",
    "readout_mean",
    "readout_sum",
]


@dataclass(frozen=True)
class DmpnnConfig:
    hidden: int = 200
    steps: int = 4
    steps_post: int = 2
    dropout_p: float = 0.15

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.steps_post < 0:
            raise ValueError("steps_post must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, bias: bool = True):
    bound = 1.0 / np.sqrt(fan_in)
    w = ad.tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = ad.tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True) if bias else None
    return w, b


@dataclass
class DmpnnParams:
    """Weights of the pre-pooling encoder.

    ``W_e`` has no bias, which keeps ``h = ReLU(h0)`` a fixed point on edges
    with nothing to aggregate.
    """

    W_edge_init: ad.Tensor
    b_edge_init: ad.Tensor
    W_e: ad.Tensor
    W_n: ad.Tensor
    b_n: ad.Tensor

    @classmethod
    def init(cls, d_n: int, d_e: int, hidden: int, rng: np.random.Generator) -> DmpnnParams:
        w0, b0 = init_linear(rng, d_n + d_e, hidden)
        we, _ = init_linear(rng, hidden, hidden, bias=False)
        wn, bn = init_linear(rng, d_n + hidden, hidden)
        return cls(w0, b0, we, wn, bn)

    def tensors(self) -> dict[str, ad.Tensor]:
        return dict(vars(self))


@dataclass
class DenseParams:
    """Weights for message passing on a coarsened (dense, weighted) graph."""

    W_e: ad.Tensor
    W_n: ad.Tensor
    b_n: ad.Tensor

    @classmethod
    def init(cls, hidden: int, rng: np.random.Generator) -> DenseParams:
        we, _ = init_linear(rng, hidden, hidden, bias=False)
        wn, bn = init_linear(rng, 2 * hidden, hidden)
        return cls(we, wn, bn)

    def tensors(self) -> dict[str, ad.Tensor]:
        return dict(vars(self))


@dataclass
class DmpnnOutput:
    X_out: ad.Tensor  # n x hidden
    E_out: ad.Tensor  # n x n x hidden, zero off-edge
    edge_states: ad.Tensor  # m x hidden


@dataclass(frozen=True)
class GraphIndex:
    """Precomputed directed-edge bookkeeping for one graph."""

    n: int
    src: np.ndarray
    dst: np.ndarray
    msg_index: np.ndarray  # per edge (i, j): edges (k, i) with k != j, padded with -1
    node_index: np.ndarray  # per node i: edges (i, j), padded with -1

    @property
    def m(self) -> int:
        return self.src.size


def _padded(groups: list[list[int]]) -> np.ndarray:
    width = max((len(g) for g in groups), default=0)
    out = np.full((len(groups), max(width, 1)), -1, dtype=np.int64)
    for r, g in enumerate(groups):
        out[r, : len(g)] = g
    return out


def graph_index(g: Graph) -> GraphIndex:
    cached = g.__dict__.get("_dmpnn_index")
    if cached is not None:
        return cached
    edges = g.directed_edges()
    n = g.n
    src = edges[:, 0].astype(np.int64) if edges.size else np.zeros(0, dtype=np.int64)
    dst = edges[:, 1].astype(np.int64) if edges.size else np.zeros(0, dtype=np.int64)
    incoming: list[list[int]] = [[] for _ in range(n)]
    outgoing: list[list[int]] = [[] for _ in range(n)]
    for e, (i, j) in enumerate(zip(src.tolist(), dst.tolist())):
        incoming[j].append(e)
        outgoing[i].append(e)
    msg = [[k for k in incoming[i] if src[k] != j] for i, j in zip(src.tolist(), dst.tolist())]
    idx = GraphIndex(n, src, dst, _padded(msg), _padded(outgoing))
    g.__dict__["_dmpnn_index"] = idx
    return idx


def _edge_inputs(g: Graph, idx: GraphIndex) -> np.ndarray:
    return np.concatenate([g.node_features[idx.src], g.edge_features[idx.src, idx.dst]], axis=1)


def init_edge_states(g: Graph, p: DmpnnParams) -> ad.Tensor:
    """``h0_ij = ReLU(W [X_i, E_ij] + b)`` for every directed edge."""
    idx = graph_index(g)
    need = g.d_n + g.d_e
    if p.W_edge_init.shape[0] != need:
        raise ValueError(f"edge-init weight expects {p.W_edge_init.shape[0]} inputs, graph gives {need}")
    hidden = p.W_edge_init.shape[1]
    if idx.m == 0:
        return ad.constant(np.zeros((0, hidden)))
    x = ad.constant(_edge_inputs(g, idx))
    return ad.relu(ad.add_bias(ad.matmul(x, p.W_edge_init), p.b_edge_init))


def message_step(
    g: Graph,
    h: ad.Tensor,
    h0: ad.Tensor,
    p: DmpnnParams,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ad.Tensor:
    idx = graph_index(g)
    if h.shape != h0.shape or h.shape[0] != idx.m:
        raise ValueError("edge states do not match the graph")
    if idx.m == 0:
        return h
    m = ad.gather_sum(h, idx.msg_index)
    lin = ad.dropout(ad.matmul(m, p.W_e), dropout_p, training, rng)
    return ad.relu(ad.add(h0, lin))


def node_update(g: Graph, h: ad.Tensor, p: DmpnnParams) -> ad.Tensor:
    """``ReLU(W_n [X_i, sum_j h_ij] + b_n)``; isolated nodes aggregate zero."""
    idx = graph_index(g)
    hidden = p.W_n.shape[1]
    if p.W_n.shape[0] != g.d_n + hidden:
        raise ValueError("node weight does not match node features")
    if idx.m == 0:
        agg = ad.constant(np.zeros((g.n, hidden)))
    else:
        agg = ad.gather_sum(h, idx.node_index)
    z = ad.concat(ad.constant(g.node_features), agg)
    return ad.relu(ad.add_bias(ad.matmul(z, p.W_n), p.b_n))


def dense_edges(g: Graph, h: ad.Tensor) -> ad.Tensor:
    """Scatter directed edge states into an n x n x hidden tensor."""
    idx = graph_index(g)
    n, hidden = g.n, h.shape[1]
    if idx.m == 0:
        return ad.constant(np.zeros((n, n, hidden)))
    flat = ad.scatter_rows(h, idx.src * n + idx.dst, n * n)
    return ad.reshape(flat, (n, n, hidden))


def forward(
    g: Graph,
    p: DmpnnParams,
    cfg: DmpnnConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    steps: int | None = None,
) -> DmpnnOutput:
    steps = cfg.steps if steps is None else steps
    if steps < 1:
        raise ValueError("DMPNN needs at least one message-passing step")
    h0 = init_edge_states(g, p)
    h = h0
    for _ in range(steps):
        h = message_step(g, h, h0, p, cfg.dropout_p, training, rng)
    x_out = node_update(g, h, p)
    return DmpnnOutput(x_out, dense_edges(g, h), h)


def dense_forward(
    x: ad.Tensor,
    e: ad.Tensor,
    p: DenseParams,
    steps: int,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> ad.Tensor:
    """Message passing on a coarsened graph where every cluster pair is an edge.

    The pooled edge tensor ``e`` plays the role of ``h0``; messages follow the
    same reverse-edge exclusion, ``m_ij = sum_k h_ki - h_ji``.
    """
    r, hidden = x.shape
    ones = ad.constant(np.ones(r))
    h = e
    for _ in range(steps):
        into = ad.einsum("kih->ih", h)
        m = ad.sub(ad.einsum("ih,j->ijh", into, ones), ad.einsum("jih->ijh", h))
        lin = ad.matmul(ad.reshape(m, (r * r, hidden)), p.W_e)
        lin = ad.dropout(ad.reshape(lin, (r, r, hidden)), dropout_p, training, rng)
        h = ad.relu(ad.add(e, lin))
    agg = ad.einsum("ijh->ih", h)
    return ad.relu(ad.add_bias(ad.matmul(ad.concat(x, agg), p.W_n), p.b_n))


def readout_mean(x: ad.Tensor, weights: ad.Tensor | None = None) -> ad.Tensor:
    """Column means, or a weighted mean normalised by the weight total."""
    x = ad.as_tensor(x)
    if x.shape[0] < 1:
        raise ValueError("readout of an empty node set")
    if weights is None:
        return ad.mean_rows(x)
    weights = ad.as_tensor(weights)
    total = ad.sum_all(ad.reshape(weights, (1, -1)))
    if abs(float(total.values)) < 1e-12:
        raise ZeroDivisionError("readout weights sum to zero")
    return ad.div_scalar(ad.einsum("i,ih->h", weights, x), total)


def readout_sum(x: ad.Tensor, weights: ad.Tensor | None = None) -> ad.Tensor:
    x = ad.as_tensor(x)
    if weights is None:
        return ad.sum_rows(ad.transpose(x))
    return ad.einsum("i,ih->h", ad.as_tensor(weights), x)
