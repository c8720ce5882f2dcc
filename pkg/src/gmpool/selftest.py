"""Embedded invariant checks, run by ``gmpool selftest``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .gradcheck import check_gradients, relative_error
from .graph_data import SyntheticSpec, permute_graph, synthetic_graph
from .linalg import EigBackwardConfig, sym_eig, sym_eig_backward
from .model import GMPoolModel, ModelConfig
from .pooling import effective_clusters, gmpool_decompose, iterative_decompose, psd_clamp

__all__ = ["CheckResult", "CHECKS", "run_selftest", "format_table"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _primitive_gradients() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    a = ad.tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = ad.tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    c = ad.tensor(rng.uniform(0.5, 2, (3, 4)), requires_grad=True)
    losses = {
        "matmul": lambda: ad.sum_all(ad.matmul(a, b)),
        "mul": lambda: ad.sum_all(ad.mul(a, c)),
        "sigmoid": lambda: ad.sum_all(ad.mul(ad.sigmoid(a), c)),
        "concat": lambda: ad.sum_all(ad.mul(ad.concat(a, c), ad.concat(c, a))),
        "mean_rows": lambda: ad.sum_all(ad.reshape(ad.mean_rows(ad.mul(a, a)), (1, -1))),
        "sqrt": lambda: ad.sum_all(ad.sqrt(c)),
    }
    worst = max(check_gradients(f, [a, b, c]) for f in losses.values())
    return worst < 1e-4, f"max relative error {worst:.2e}"


def _reconstruction() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst_s = worst_d = 0.0
    for _ in range(20):
        n = int(rng.integers(1, 17))
        m = rng.uniform(0, 1, (n, n))
        m = 0.5 * (m + m.T)
        op, d = gmpool_decompose(m)
        s = op.S.values
        worst_s = max(worst_s, float(np.linalg.norm(s.T @ s - psd_clamp(m))))
        worst_d = max(worst_d, float(np.linalg.norm(s @ s.T - d)))
    return worst_s <= 1e-8 and worst_d <= 1e-10, f"|S'S - M+| {worst_s:.1e}, |SS' - D| {worst_d:.1e}"


def _eig_gradient() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    m = (q * np.array([4.0, 2.5, 1.0, -0.5, -2.0])) @ q.T
    eig = sym_eig(m)
    got = sym_eig_backward(eig, None, 2.0 * eig.values)
    num = np.zeros_like(m)
    eps = 1e-6
    for i in range(5):
        for j in range(i, 5):
            e = np.zeros_like(m)
            e[i, j] = e[j, i] = eps
            d = (np.sum(sym_eig(m + e).values ** 2) - np.sum(sym_eig(m - e).values ** 2)) / (2 * eps)
            num[i, j] = num[j, i] = d if i == j else d / 2
    err = relative_error(got, num, 1e-6)
    return err < 1e-5, f"max relative error {err:.2e}"


def _degenerate_stability() -> tuple[bool, str]:
    cfg = EigBackwardConfig()
    rng = np.random.default_rng(3)
    worst = 0.0
    for n in (2, 5, 16):
        eig = sym_eig(np.eye(n))
        up = rng.normal(size=(n, n))
        g = sym_eig_backward(eig, up, rng.normal(size=n), cfg)
        if not np.all(np.isfinite(g)):
            return False, f"non-finite gradient at n={n}"
        worst = max(worst, float(np.max(np.abs(g)) / (cfg.k_cap * (np.linalg.norm(up) + 1.0))))
    return worst <= 1.0, f"max |grad| / bound {worst:.2e}"


def _equivariance() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    model = GMPoolModel.init(ModelConfig(hidden=8), 4, 2, seed=0)
    for _ in range(5):
        g, _, _ = synthetic_graph(SyntheticSpec(group_count=3), rng)
        perm = rng.permutation(g.n)
        m = model.grouping(g).values
        mp = model.grouping(permute_graph(g, perm)).values
        if not np.array_equal(mp, m[np.ix_(perm, perm)]):
            return False, "grouping matrix is not permutation equivariant"
        if effective_clusters(m) != effective_clusters(mp):
            return False, "effective cluster count changed under relabeling"
    return True, "exact on 5 graphs"


def _block_oracle() -> tuple[bool, str]:
    m = np.zeros((6, 6))
    for lo, hi in ((0, 3), (3, 5), (5, 6)):
        m[lo:hi, lo:hi] = 1.0
    lam = sym_eig(m).values
    ok = np.allclose(lam, [3, 2, 1, 0, 0, 0], atol=1e-8)
    ok &= effective_clusters(m, 1.0) == 2 and effective_clusters(m, 0.5) == 3
    return bool(ok), f"eigenvalues {np.round(lam, 10).tolist()}"


def _iterative() -> tuple[bool, str]:
    m = np.kron(np.eye(2), np.ones((2, 2)))
    res = iterative_decompose(m, 2, iters=500)
    mono = all(b <= a + 1e-12 for a, b in zip(res.loss_trace, res.loss_trace[1:]))
    return res.reconstruction_error < 1e-3 and mono, f"error {res.reconstruction_error:.1e}, monotone {mono}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "primitive gradients": _primitive_gradients,
    "eigen reconstruction": _reconstruction,
    "eigen backward": _eig_gradient,
    "degenerate spectra": _degenerate_stability,
    "permutation equivariance": _equivariance,
    "block-diagonal oracle": _block_oracle,
    "iterative decomposition": _iterative,
}


def run_selftest() -> list[CheckResult]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crashed run
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail))
    return out


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    return "\n".join(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}" for r in results)
