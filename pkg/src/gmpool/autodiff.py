"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to parent gradients.  :func:`backward`
orders the reachable nodes into a :class:`Tape` (creation order is a valid
topological order) and replays it in reverse.

Broadcasting is deliberately absent apart from scalar operands; bias addition
has its own op (:func:`add_bias`) so every backward rule stays auditable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "tensor",
    "constant",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "abs_",
    "relu",
    "sigmoid",
    "sqrt",
    "concat",
    "reduce",
    "sum_rows",
    "mean_rows",
    "sum_all",
    "add_bias",
    "add_scalar",
    "reshape",
    "transpose",
    "gather_rows",
    "scatter_rows",
    "einsum",
    "gather_sum",
    "div_scalar",
    "clamp_min",
    "reciprocal",
    "as_tensor",
    "dropout",
    "custom",
    "backward",
    "zero_grad",
]

_counter = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    """Dense real array that can take part in reverse-mode differentiation."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_id", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar for the common binary ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


@dataclass
class Tape:
    """Operations reachable from a root, in topological (creation) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        seen: set[int] = set()
        stack = [root]
        found: list[Tensor] = []
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen.add(t._id)
            found.append(t)
            stack.extend(t._parents)
        found.sort(key=lambda t: t._id)
        return cls([t for t in found if t._backward is not None])

    def __len__(self) -> int:
        return len(self.nodes)


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def constant(values) -> Tensor:
    return Tensor(values)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_as_tensor = as_tensor


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn, name: str) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = values
    out._id = next(_counter)
    out.name = name
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = np.zeros_like(values) if out.requires_grad else None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def custom(inputs: Sequence[Tensor], values: np.ndarray, backward_fn, name: str = "custom") -> Tensor:
    """Wrap an externally computed result as a tape node.

    ``backward_fn(g)`` must return one gradient (or ``None``) per input.
    """
    return _make(np.asarray(values, dtype=np.float64), list(inputs), backward_fn, name)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bw(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# element-wise


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.values.size != 1 and b.values.size != 1:
        raise ValueError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.values - b.values, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")
    av, bv = a.values, b.values

    def bw(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make(av * bv, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a fixed Python scalar."""
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,), "scale")


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.values)
    return _make(np.abs(a.values), (a,), lambda g: (g * s,), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.values)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise ValueError("sqrt requires strictly positive input")
    r = np.sqrt(a.values)
    return _make(r, (a,), lambda g: (g * 0.5 / r,), "sqrt")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)`` element-wise; gradient passes only where ``a > floor``."""
    mask = a.values > floor
    return _make(np.where(mask, a.values, float(floor)), (a,), lambda g: (g * mask,), "clamp_min")


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.values == 0):
        raise ZeroDivisionError("reciprocal of zero")
    r = 1.0 / a.values
    return _make(r, (a,), lambda g: (-g * r * r,), "reciprocal")


_UNARY = {"abs": abs_, "relu": relu, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch one of add, sub, mul, abs, relu, sigmoid by name."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](_as_tensor(a))
    raise ValueError(f"unknown element-wise op {op!r}")


# ---------------------------------------------------------------------------
# structural


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of two matrices with equal row counts."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"concat leading-dimension mismatch: {a.shape} vs {b.shape}")
    p = a.shape[1]
    return _make(
        np.concatenate([a.values, b.values], axis=1),
        (a, b),
        lambda g: (g[:, :p], g[:, p:]),
        "concat",
    )


def _ordered_sum(x: np.ndarray, axis: int) -> np.ndarray:
    # Sorting the addends makes the result independent of their order,
    # which keeps node relabelings bit-exact.
    return np.sort(x, axis=axis).sum(axis=axis)


def sum_rows(a: Tensor) -> Tensor:
    """Sum inside each row: ``[[1, 2], [3, 4]] -> [3, 7]``."""
    if a.ndim != 2:
        raise ValueError("sum_rows expects a matrix")
    k = a.shape[1]
    return _make(_ordered_sum(a.values, 1), (a,), lambda g: (np.repeat(g[:, None], k, axis=1),), "sum_rows")


def mean_rows(a: Tensor) -> Tensor:
    """Average the rows together (column means): ``n x d -> d``."""
    if a.ndim != 2:
        raise ValueError("mean_rows expects a matrix")
    n = a.shape[0]
    return _make(
        _ordered_sum(a.values, 0) / n,
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape).copy(),),
        "mean_rows",
    )


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum_all")


_REDUCE = {"sum_rows": sum_rows, "mean_rows": mean_rows, "sum_all": sum_all}


def reduce(op: str, a: Tensor) -> Tensor:
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction {op!r}")
    if a.ndim != 2:
        raise ValueError(f"{op} expects a 2-dimensional tensor, got rank {a.ndim}")
    return _REDUCE[op](a)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of an n x d matrix."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ValueError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    return _make(x.values + b.values, (x, b), lambda g: (g, _ordered_sum(g, 0)), "add_bias")


def add_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Add a single-element tensor to every entry of ``x``."""
    if s.values.size != 1:
        raise ValueError("add_scalar expects a one-element tensor")
    sshape = s.shape
    return _make(x.values + s.values.reshape(()), (x, s), lambda g: (g, np.full(sshape, g.sum())), "add_scalar")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _make(a.values.T.copy(), (a,), lambda g: (g.T,), "transpose")


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``a[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.values[index], (a,), bw, "gather_rows")


def scatter_rows(a: Tensor, index: np.ndarray, size: int) -> Tensor:
    """Place row ``k`` of ``a`` at position ``index[k]`` of a zero array (indices unique)."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((size,) + a.shape[1:])
    out[index] = a.values
    return _make(out, (a,), lambda g: (g[index],), "scatter_rows")


def gather_sum(a: Tensor, index: np.ndarray) -> Tensor:
    """``out[r] = sum(a[index[r, c]] for c with index[r, c] >= 0)``.

    ``index`` is a padded (rows x width) integer matrix using -1 as filler.
    Addends are sorted before summation, so the result depends only on the
    multiset of rows gathered, not on their order.
    """
    index = np.asarray(index, dtype=np.int64)
    valid = index >= 0
    safe = np.where(valid, index, 0)
    picked = a.values[safe] * valid[(...,) + (None,) * (a.ndim - 1)]
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        rows = np.broadcast_to(np.arange(index.shape[0])[:, None], index.shape)
        np.add.at(out, safe[valid], g[rows[valid]])
        return (out,)

    return _make(_ordered_sum(picked, 1), (a,), bw, "gather_sum")


def div_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Divide every entry of ``a`` by a one-element tensor."""
    if s.values.size != 1:
        raise ValueError("div_scalar expects a one-element divisor")
    d = float(s.values.reshape(()))
    if d == 0.0:
        raise ZeroDivisionError("division by a zero scalar")
    av = a.values
    sshape = s.shape
    return _make(
        av / d,
        (a, s),
        lambda g: (g / d, np.full(sshape, -(g * av).sum() / (d * d))),
        "div_scalar",
    )


def einsum(spec: str, *operands: Tensor) -> Tensor:
    """Differentiable ``np.einsum`` for explicit specs without repeated
    subscripts inside one operand."""
    ins, out = spec.replace(" ", "").split("->")
    subs = ins.split(",")
    if len(subs) != len(operands):
        raise ValueError("einsum operand count mismatch")
    for s in subs:
        if len(set(s)) != len(s):
            raise ValueError("repeated subscripts within an operand are not supported")
    vals = [op.values for op in operands]

    def bw(g):
        grads = []
        for k, sk in enumerate(subs):
            if not operands[k].requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(subs) if j != k]
            other_vals = [v for j, v in enumerate(vals) if j != k]
            # indices of operand k that appear nowhere else are summed away in
            # the forward pass, so their gradient is broadcast back
            missing = [c for c in sk if c not in out and all(c not in s for s in others)]
            if missing:
                reduced = "".join(c for c in sk if c not in missing)
                part = np.einsum(",".join([out] + others) + "->" + reduced, g, *other_vals)
                idx = tuple(slice(None) if c not in missing else None for c in sk)
                full = np.broadcast_to(part[idx], operands[k].shape).copy()
            else:
                full = np.einsum(",".join([out] + others) + "->" + sk, g, *other_vals)
            grads.append(full)
        return grads

    return _make(np.einsum(spec, *vals), operands, bw, "einsum")


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.values * mask, (a,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# gradient driver


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tensor.

    Returns the tape that was replayed.  Gradients accumulate across calls;
    use :func:`zero_grad` between steps.
    """
    if loss.values.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_root(loss)
    # gradients flowing into interior nodes are staged here until the node is replayed
    pending: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        node.grad += g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad += pg
            elif parent._id in pending:
                pending[parent._id] = pending[parent._id] + pg
            else:
                pending[parent._id] = np.asarray(pg, dtype=np.float64)
    return tape


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0.0
