"""Symmetric eigendecomposition with a stabilised backward rule.

The forward solver is the classical cyclic Jacobi method.  The backward rule is
the standard one for ``M = O diag(lam) O^T``::

    dL/dM = O (K^T * (O^T dL/dO) + diag(dL/dlam)) O^T,   K_ij = 1 / (lam_i - lam_j)

with the off-diagonal of ``K`` clamped to ``+-k_cap`` wherever the eigengap
falls under ``eigengap_floor`` so degenerate spectra never yield Inf/NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import autodiff as ad

__all__ = [
    "SymEig",
    "EigBackwardConfig",
    "ConvergenceError",
    "sym_eig",
    "sym_eig_backward",
    "sqrt_clamped",
    "eigh",
    "sqrt_clamped_op",
]

MAX_SWEEPS = 50
REL_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """Jacobi sweeps exhausted before the off-diagonal mass vanished."""

    def __init__(self, residual: float, sweeps: int):
        super().__init__(f"Jacobi did not converge after {sweeps} sweeps (max off-diagonal {residual:.3e})")
        self.residual = residual
        self.sweeps = sweeps


@dataclass(frozen=True)
class SymEig:
    """Eigenpairs of a symmetric matrix, eigenvalues sorted descending.

    ``basis[:, k]`` is the unit eigenvector belonging to ``values[k]``.
    """

    basis: np.ndarray
    values: np.ndarray
    sweeps: int = 0

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.basis * self.values) @ self.basis.T


@dataclass(frozen=True)
class EigBackwardConfig:
    eigengap_floor: float = 1e-4
    k_cap: float | None = None

    def __post_init__(self):
        if not self.eigengap_floor > 0:
            raise ValueError("eigengap_floor must be positive")
        if self.k_cap is None:
            object.__setattr__(self, "k_cap", 1.0 / self.eigengap_floor)
        elif not np.isclose(self.k_cap, 1.0 / self.eigengap_floor):
            raise ValueError("k_cap must equal 1 / eigengap_floor")


@numba.njit(cache=True)
def _jacobi(a, tol, max_sweeps):
    n = a.shape[0]
    v = np.eye(n)
    sweeps = 0
    while True:
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                if abs(a[p, q]) > off:
                    off = abs(a[p, q])
        if off <= tol or sweeps >= max_sweeps:
            return a, v, sweeps, off
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if tau >= 0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # A <- J^T A J, columns then rows
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    # first component with |x| > 1e-12 made non-negative
    for k in range(basis.shape[1]):
        col = basis[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            basis[:, k] = -col
    return basis


def sym_eig(m, max_sweeps: int = MAX_SWEEPS) -> SymEig:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    The input is symmetrised as ``(M + M^T) / 2`` after checking that it is
    symmetric to within 1e-9.  Iteration stops once the largest off-diagonal
    magnitude drops below ``1e-12 * ||M||_F``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ad.NonFiniteError("sym_eig input contains non-finite values")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > 1e-9 * scale:
        raise ValueError("sym_eig input is not symmetric")
    a = 0.5 * (m + m.T)
    tol = REL_TOL * np.linalg.norm(a)
    d, v, sweeps, off = _jacobi(a.copy(), tol, max_sweeps)
    if off > tol:
        raise ConvergenceError(off, sweeps)
    lam = np.diag(d).copy()
    order = np.argsort(-lam, kind="stable")
    return SymEig(basis=_fix_signs(v[:, order].copy()), values=lam[order], sweeps=sweeps)


def _k_matrix(lam: np.ndarray, cfg: EigBackwardConfig) -> np.ndarray:
    gap = lam[:, None] - lam[None, :]
    small = np.abs(gap) < cfg.eigengap_floor
    safe = np.where(small, 1.0, gap)
    # exact ties get 0: rotations inside a degenerate eigenspace are a gauge freedom
    k = np.where(small, np.sign(gap) * cfg.k_cap, 1.0 / safe)
    np.fill_diagonal(k, 0.0)
    return k


def sym_eig_backward(
    eig: SymEig,
    dL_dO: np.ndarray | None,
    dL_dlam: np.ndarray | None,
    cfg: EigBackwardConfig = EigBackwardConfig(),
) -> np.ndarray:
    """Gradient of a loss w.r.t. the symmetric input of :func:`sym_eig`."""
    n = eig.n
    u = eig.basis
    if dL_dO is None:
        dL_dO = np.zeros((n, n))
    if dL_dlam is None:
        dL_dlam = np.zeros(n)
    dL_dO = np.asarray(dL_dO, dtype=np.float64)
    dL_dlam = np.asarray(dL_dlam, dtype=np.float64)
    if dL_dO.shape != (n, n) or dL_dlam.shape != (n,):
        raise ValueError("upstream gradient shapes do not match the decomposition")
    k = _k_matrix(eig.values, cfg)
    inner = k.T * (u.T @ dL_dO) + np.diag(dL_dlam)
    g = u @ inner @ u.T
    return 0.5 * (g + g.T)


def sqrt_clamped(lam, floor: float = 0.0) -> np.ndarray:
    """Element-wise ``sqrt(max(lam, floor))``; negative eigenvalues become 0."""
    return np.sqrt(np.maximum(np.asarray(lam, dtype=np.float64), floor))


# ---------------------------------------------------------------------------
# tape-aware wrappers


def eigh(m: ad.Tensor, cfg: EigBackwardConfig = EigBackwardConfig()) -> tuple[SymEig, ad.Tensor, ad.Tensor]:
    """Differentiable :func:`sym_eig`; returns the decomposition plus
    ``(basis, values)`` as tape tensors."""
    eig = sym_eig(m.values)
    basis = ad.custom([m], eig.basis, lambda g: (sym_eig_backward(eig, g, None, cfg),), "eig_basis")
    values = ad.custom([m], eig.values, lambda g: (sym_eig_backward(eig, None, g, cfg),), "eig_values")
    return eig, basis, values


def sqrt_clamped_op(lam: ad.Tensor, floor: float = 0.0, grad_floor: float = 1e-4) -> ad.Tensor:
    """Differentiable :func:`sqrt_clamped`.

    The derivative ``1 / (2 sqrt(lam))`` is evaluated at ``max(lam, grad_floor)``
    so eigenvalues creeping towards zero cannot produce unbounded gradients.
    """
    x = lam.values
    out = sqrt_clamped(x, floor)
    active = x > floor
    deriv = np.where(active, 0.5 / np.sqrt(np.maximum(x, grad_floor)), 0.0)
    return ad.custom([lam], out, lambda g: (g * deriv,), "sqrt_clamped")
