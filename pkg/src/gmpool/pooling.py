"""Grouping-matrix pooling.

A pairwise classifier scores whether two nodes belong together, giving a
symmetric grouping matrix ``M``.  Pooling operators are square roots of
``M``: ``S^T S = M`` with ``S`` acting on node space from the left
(``X_pooled = S X``).  Nothing here takes a cluster count; the rank of ``M``
decides how many rows of ``S`` are non-zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .linalg import EigBackwardConfig, SymEig, eigh, sqrt_clamped_op, sym_eig

__all__ = [
    "PoolingOperator",
    "CoarsenedGraph",
    "IterativeResult",
    "pairwise_input",
    "grouping_matrix",
    "gmpool_decompose",
    "gmpool_coarsen",
    "ngmpool_coarsen",
    "iterative_decompose",
    "effective_clusters",
    "significant_rows",
    "psd_clamp",
]

EIG_COUNT_TOL = 1e-9


@dataclass
class PoolingOperator:
    S: ad.Tensor  # r x n
    scheme: str
    degree: ad.Tensor | None = None  # diagonal of D = S S^T
    eig: SymEig | None = None

    @property
    def D(self) -> np.ndarray:
        return np.diag(self.degree.values)


@dataclass
class CoarsenedGraph:
    x: ad.Tensor  # r x hidden
    e: ad.Tensor  # r x r x hidden
    a: ad.Tensor  # r x r
    ones: ad.Tensor  # length r aggregation weights


def pairwise_input(x) -> ad.Tensor:
    """``T[i, j] = |X_i - X_j|`` per channel; symmetric with zero diagonal."""
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("pairwise_input expects an n x d matrix with n >= 1")
    xv = x.values
    diff = xv[:, None, :] - xv[None, :, :]
    sign = np.sign(diff)

    def bw(g):
        return ((sign * (g + g.transpose(1, 0, 2))).sum(axis=1),)

    return ad.custom([x], np.abs(diff), bw, "pairwise_input")


def grouping_matrix(t, w, b, clamp_diagonal: bool = False) -> ad.Tensor:
    """``M[i, j] = sigmoid(w . T[i, j] + b)``.

    With ``clamp_diagonal`` the diagonal is pinned to 1 instead of being the
    classifier's score at distance zero.
    """
    t, w, b = ad.as_tensor(t), ad.as_tensor(w), ad.as_tensor(b)
    if t.ndim != 3 or t.shape[0] != t.shape[1]:
        raise ValueError("pairwise tensor must be n x n x hidden")
    n, _, hidden = t.shape
    if w.values.size != hidden:
        raise ValueError(f"classifier weight has {w.values.size} entries, expected {hidden}")
    if b.values.size != 1:
        raise ValueError("classifier bias must be a scalar")
    w = w if w.shape == (hidden, 1) else ad.reshape(w, (hidden, 1))
    logits = ad.reshape(ad.matmul(ad.reshape(t, (n * n, hidden)), w), (n, n))
    m = ad.sigmoid(ad.add_scalar(logits, b))
    if clamp_diagonal:
        eye = np.eye(n)
        m = ad.add(ad.mul(m, ad.constant(1.0 - eye)), ad.constant(eye))
    return m


def psd_clamp(m) -> np.ndarray:
    """``O max(lam, 0) O^T`` for a symmetric matrix."""
    eig = sym_eig(np.asarray(m, dtype=np.float64))
    return (eig.basis * np.maximum(eig.values, 0.0)) @ eig.basis.T


def gmpool_decompose(m, cfg: EigBackwardConfig = EigBackwardConfig()) -> tuple[PoolingOperator, np.ndarray]:
    """Square root of ``M`` via its eigendecomposition.

    ``S = diag(sqrt(max(lam, 0))) O^T``, so ``S^T S`` is the PSD part of ``M``
    and ``S S^T = diag(max(lam, 0))``.  Each row is oriented so its entries
    sum to a non-negative value, which keeps the pooled aggregation weights
    ``S 1`` non-negative.
    """
    m = ad.as_tensor(m)
    eig, basis, values = eigh(m, cfg)
    root = sqrt_clamped_op(values, 0.0, cfg.eigengap_floor)
    orient = np.where(eig.basis.sum(axis=0) < 0, -1.0, 1.0)
    s = ad.einsum("k,k,ik->ki", ad.constant(orient), root, basis)
    degree = ad.mul(root, root)
    op = PoolingOperator(s, "eigen", degree, eig)
    return op, op.D


def _coarsen(s: ad.Tensor, t: ad.Tensor, x, e, a) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    x, e, a = ad.as_tensor(x), ad.as_tensor(e), ad.as_tensor(a)
    n = s.shape[1]
    if x.shape[0] != n or e.shape[:2] != (n, n) or a.shape != (n, n):
        raise ValueError(f"pooling operator acts on {n} nodes but graph shapes are {x.shape}, {e.shape}, {a.shape}")
    left = ad.einsum("ai,ijh->ajh", s, e)
    return (
        ad.matmul(s, x),
        ad.einsum("ajh,bj->abh", left, t),
        ad.matmul(ad.matmul(s, a), ad.transpose(t)),
    )


def gmpool_coarsen(x, e, a, s) -> CoarsenedGraph:
    """``X' = S X``, ``E' = S E S^T`` per channel, ``A' = S A S^T``, ``1' = S 1``."""
    if isinstance(s, PoolingOperator):
        s = s.S
    s = ad.as_tensor(s)
    xs, es, as_ = _coarsen(s, s, x, e, a)
    return CoarsenedGraph(xs, es, as_, ad.sum_rows(s))


def ngmpool_coarsen(x, e, a, m) -> CoarsenedGraph:
    """Decomposition-free pooling: ``X' = M X``, ``E' = M E M``, ``A' = M A M``."""
    m = ad.as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("grouping matrix must be square")
    # M is symmetric, so M E M == M E M^T
    xs, es, as_ = _coarsen(m, m, x, e, a)
    return CoarsenedGraph(xs, es, as_, ad.constant(np.ones(m.shape[0])))


def significant_rows(s, tol: float = 1e-6) -> np.ndarray:
    """Indices of rows of ``S`` whose Euclidean norm exceeds ``tol``."""
    sv = s.S.values if isinstance(s, PoolingOperator) else ad.as_tensor(s).values
    return np.flatnonzero(np.linalg.norm(sv, axis=1) > tol)


@dataclass
class IterativeResult:
    W: np.ndarray  # r x n, columns sum to 1
    W_raw: np.ndarray  # r x n, reconstruction-optimal
    loss_trace: list[float] = field(default_factory=list)

    @property
    def reconstruction_error(self) -> float:
        return float(np.sqrt(self.loss_trace[-1])) if self.loss_trace else float("nan")


def iterative_decompose(
    m,
    rank: int,
    iters: int = 500,
    tol: float = 1e-12,
    seed: int = 0,
    beta: float = 0.25,
    init: np.ndarray | None = None,
) -> IterativeResult:
    """Low-rank non-negative square root ``M ~ W^T W`` by multiplicative updates.

    Each step applies ``W <- W * (1 - beta + beta * (W M) / (W W^T W + 1e-12))``
    (``beta = 1`` is the undamped rule, which can oscillate; the default
    ``beta = 1/4`` keeps the loss non-increasing).  A random start is rescaled
    to its best scalar multiple before iterating.  Iteration stops after
    ``iters`` steps or once the relative loss decrease falls below ``tol``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("grouping matrix must be square")
    n = m.shape[0]
    if not 1 <= rank <= n:
        raise ValueError(f"rank must lie in [1, {n}], got {rank}")
    if np.any(m < 0):
        raise ValueError("iterative decomposition needs an entrywise non-negative matrix")
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    if init is None:
        rng = np.random.default_rng(seed)
        scale = np.sqrt(max(m.mean(), 1e-12) / rank)
        w = rng.uniform(0.0, 2.0 * scale, size=(rank, n))
        # best scalar multiple of the random start: alpha^4 = <M, W'W> / |W'W|^2
        g = w.T @ w
        fit = float(np.sum(m * g)) / float(np.sum(g * g))
        if fit > 0:
            w *= fit**0.25
    else:
        w = np.array(init, dtype=np.float64)
        if w.shape != (rank, n) or np.any(w < 0):
            raise ValueError("init must be a non-negative rank x n matrix")

    def loss(w):
        return float(np.sum((m - w.T @ w) ** 2))

    trace = [loss(w)]
    for _ in range(iters):
        ratio = (w @ m) / (w @ w.T @ w + 1e-12)
        w = w * (1.0 - beta + beta * ratio)
        trace.append(loss(w))
        prev, cur = trace[-2], trace[-1]
        if prev == 0.0 or (prev - cur) / prev < tol:
            break
    col = w.sum(axis=0)
    normed = np.divide(w, col, out=np.zeros_like(w), where=col > 0)
    return IterativeResult(normed, w, trace)


def effective_clusters(m, threshold: float = 1.0) -> int:
    """Number of eigenvalues of ``M`` strictly above ``threshold``.

    Eigenvalues within 1e-9 of the threshold count as equal to it.
    """
    if isinstance(m, SymEig):
        lam = m.values
    else:
        mv = ad.as_tensor(m).values
        if mv.size == 0:
            return 0
        lam = sym_eig(mv).values
    return int(np.sum(lam > threshold + EIG_COUNT_TOL))
