"""End-to-end acceptance criteria.

Each test records one PASS/FAIL line in ``RESULTS``; ``conftest.py`` prints
them in the terminal summary.  Run alone with::

    pytest tests/test_acceptance.py -v
"""

import inspect
import re
import time

import numpy as np
import pytest

from gmpool import autodiff as ad
from gmpool import dmpnn
from gmpool.cli import main
from gmpool.gradcheck import check_gradients, relative_error
from gmpool.graph_data import Graph, SyntheticSpec, generate_synthetic, permute_graph, synthetic_graph
from gmpool.linalg import EigBackwardConfig, eigh, sqrt_clamped_op, sym_eig, sym_eig_backward
from gmpool.model import GMPoolModel, ModelConfig
from gmpool.pooling import (
    effective_clusters,
    gmpool_coarsen,
    gmpool_decompose,
    grouping_matrix,
    iterative_decompose,
    ngmpool_coarsen,
    pairwise_input,
    psd_clamp,
    significant_rows,
)
from gmpool.training import TrainConfig, batch_loss, loss_bce, loss_mse, train

RESULTS: dict[int, str] = {}

NAMES = {
    1: "reconstruction suite",
    2: "gradient suite",
    3: "stability suite",
    4: "equivariance suite",
    5: "block-diagonal oracle",
    6: "NGMPool identity",
    7: "iterative decomposition",
    8: "end-to-end learning",
    9: "rank adaptivity",
    10: "CLI determinism",
}


def _record(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k:>2} {NAMES[k]:<24} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[k] = line
    print(line)


def _blocks(*sizes):
    n = sum(sizes)
    m = np.zeros((n, n))
    lo = 0
    for k in sizes:
        m[lo : lo + k, lo : lo + k] = 1.0
        lo += k
    return m


# ---------------------------------------------------------------------------


def test_01_reconstruction():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_s = worst_d = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 33))
        m = rng.uniform(0, 1, (n, n))
        m = 0.5 * (m + m.T)
        op, d = gmpool_decompose(m)
        s = op.S.values
        lam_plus = np.maximum(op.eig.values, 0.0)
        worst_s = max(worst_s, float(np.linalg.norm(s.T @ s - psd_clamp(m))))
        worst_d = max(worst_d, float(np.linalg.norm(s @ s.T - np.diag(lam_plus))))
        np.testing.assert_array_equal(np.diag(d), op.degree.values)
    elapsed = time.perf_counter() - t0
    ok = worst_s <= 1e-8 and worst_d <= 1e-10 and elapsed < 10
    _record(1, ok, f"|S'S - M+| {worst_s:.1e}, |SS' - L+| {worst_d:.1e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------


def _primitive_cases(rng):
    """(name, loss closure, leaves) for every differentiable primitive."""
    a = ad.tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = ad.tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    c = ad.tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    # entries at least 0.2 away from the kinks of abs, relu and clamp_min
    kinked = rng.uniform(0.2, 2, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    k = ad.tensor(kinked, requires_grad=True)
    pos = ad.tensor(rng.uniform(0.5, 2, (3, 4)), requires_grad=True)
    vec = ad.tensor(rng.uniform(-1, 1, 4), requires_grad=True)
    sc = ad.tensor(rng.uniform(1, 2, (1,)), requires_grad=True)
    w = ad.constant(rng.normal(size=(3, 4)))
    idx = np.array([2, 0, 0, 1])
    pad = np.array([[0, 2, -1], [1, -1, -1], [2, 1, 0]])
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    sym = ad.tensor((q * np.array([3.0, 1.5, 0.6, -0.8])) @ q.T, requires_grad=True)
    lam = ad.tensor(np.array([4.0, 0.5, 2.0]), requires_grad=True)
    t3 = ad.tensor(rng.uniform(0.5, 1.5, (3, 3, 2)), requires_grad=True)
    wv = ad.tensor(rng.normal(size=2), requires_grad=True)
    bias = ad.tensor(rng.normal(size=(1,)), requires_grad=True)
    logit = ad.tensor(rng.normal(size=4), requires_grad=True)
    x4 = ad.tensor(rng.normal(size=(4, 2)), requires_grad=True)
    w16 = ad.constant(np.arange(32.0).reshape(16, 2))
    w9 = ad.constant(np.arange(9.0).reshape(3, 3))

    def wsum(t):
        return ad.sum_all(ad.mul(t, w))

    def dropped():
        return ad.dropout(a, 0.3, True, np.random.default_rng(5))

    def symmetric():
        return ad.scale(ad.add(sym, ad.transpose(sym)), 0.5)

    def eig_loss():
        _, basis, values = eigh(symmetric())
        weights = ad.constant(np.arange(16.0).reshape(4, 4))
        return ad.add(ad.sum_all(ad.mul(basis, weights)), ad.sum_all(ad.mul(values, values)))

    return [
        ("matmul", lambda: ad.sum_all(ad.matmul(a, b)), [a, b]),
        ("add", lambda: wsum(ad.add(a, c)), [a, c]),
        ("sub", lambda: wsum(ad.sub(a, c)), [a, c]),
        ("mul", lambda: wsum(ad.mul(a, c)), [a, c]),
        ("scale", lambda: wsum(ad.scale(a, -1.7)), [a]),
        ("abs", lambda: wsum(ad.abs_(k)), [k]),
        ("relu", lambda: wsum(ad.relu(k)), [k]),
        ("sigmoid", lambda: wsum(ad.sigmoid(a)), [a]),
        ("sqrt", lambda: wsum(ad.sqrt(pos)), [pos]),
        ("clamp_min", lambda: wsum(ad.clamp_min(k, 0.0)), [k]),
        ("reciprocal", lambda: wsum(ad.reciprocal(pos)), [pos]),
        ("concat", lambda: ad.sum_all(ad.mul(ad.concat(a, c), ad.concat(c, a))), [a, c]),
        ("sum_rows", lambda: ad.sum_all(ad.mul(ad.sum_rows(a), ad.sum_rows(c))), [a, c]),
        ("mean_rows", lambda: ad.sum_all(ad.mul(ad.mean_rows(a), vec)), [a, vec]),
        ("sum_all", lambda: ad.mul(ad.sum_all(a), ad.sum_all(c)), [a, c]),
        ("add_bias", lambda: wsum(ad.mul(ad.add_bias(a, vec), c)), [a, vec, c]),
        ("add_scalar", lambda: wsum(ad.mul(ad.add_scalar(a, sc), c)), [a, sc, c]),
        ("reshape", lambda: wsum(ad.mul(ad.reshape(b, (3, 4)), c)), [b, c]),
        ("transpose", lambda: wsum(ad.mul(ad.transpose(b), c)), [b, c]),
        ("gather_rows", lambda: ad.sum_all(ad.matmul(ad.gather_rows(a, idx), b)), [a, b]),
        ("scatter_rows", lambda: wsum(ad.mul(ad.scatter_rows(ad.gather_rows(a, [1, 2]), [0, 2], 3), c)), [a, c]),
        ("gather_sum", lambda: wsum(ad.mul(ad.gather_sum(a, pad), c)), [a, c]),
        ("div_scalar", lambda: wsum(ad.div_scalar(a, sc)), [a, sc]),
        ("einsum", lambda: ad.sum_all(ad.mul(ad.einsum("ij,jk,ij->k", a, b, c), ad.constant([1.0, -2.0, 0.5]))), [a, b, c]),
        ("dropout", lambda: wsum(ad.mul(dropped(), c)), [a, c]),
        ("eigh", eig_loss, [sym]),
        ("sqrt_clamped", lambda: ad.sum_all(ad.mul(sqrt_clamped_op(lam), lam)), [lam]),
        ("pairwise_input", lambda: ad.sum_all(ad.mul(ad.reshape(pairwise_input(x4), (16, 2)), w16)), [x4]),
        ("grouping_matrix", lambda: ad.sum_all(ad.mul(grouping_matrix(t3, wv, bias), w9)), [t3, wv, bias]),
        ("loss_mse", lambda: loss_mse(logit, [0.5, -1.0, 2.0, 0.0]), [logit]),
        ("loss_bce", lambda: loss_bce(logit, [1.0, 0.0, 1.0, 1.0]), [logit]),
    ]


def _pipeline_margins(model, g):
    """Distances of every non-smooth operation in the forward pass from its kink.

    Exact zeros are structural (dead channels, bias-free maps of zero
    vectors) and stay zero under small perturbations, so they are skipped.
    """

    def nonzero_min(v):
        v = np.abs(v)
        v = v[v > 0]
        return float(v.min()) if v.size else np.inf

    pre = []
    relu = ad.relu

    def recording_relu(x):
        pre.append(nonzero_min(x.values))
        return relu(x)

    ad.relu = recording_relu
    try:
        res = model.forward(g)
    finally:
        ad.relu = relu
    lam = res.eig.values
    x = res.encoded.X_out.values
    return {
        "relu": min(pre),
        "abs": nonzero_min(x[:, None, :] - x[None, :, :]),
        "eigengap": float(np.min(np.abs(np.diff(lam)))),
        "sqrt": float(np.min(np.abs(lam))),
        "orientation": float(np.min(np.abs(res.eig.basis.sum(axis=0)))),
    }


def _pipeline_case():
    """First seed whose 4-node graph and hidden-3 model are clear of all kinks."""
    a = np.array([[0, 1, 1, 0], [1, 0, 1, 0], [1, 1, 0, 1], [0, 0, 1, 0]], float)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        e = rng.normal(size=(4, 4, 2))
        e = 0.5 * (e + e.transpose(1, 0, 2)) * a[:, :, None]
        g = Graph(rng.normal(size=(4, 3)), e, a, 1.5)
        model = GMPoolModel.init(ModelConfig(hidden=3, dropout_p=0.0), 3, 2, seed=seed)
        m = _pipeline_margins(model, g)
        if m["eigengap"] > 1e-2 and m["sqrt"] > 1e-2 and min(m["relu"], m["abs"], m["orientation"]) > 1e-3:
            return seed, g, model, m
    raise AssertionError("no kink-free 4-node case found")


def test_02_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    primitive_err = {}
    for name, fn, leaves in _primitive_cases(rng):
        primitive_err[name] = check_gradients(fn, leaves, eps=1e-6)
    worst_name = max(primitive_err, key=primitive_err.get)

    seed, g, model, margins = _pipeline_case()
    pipeline_err = check_gradients(lambda: loss_mse(model.forward(g).prediction, [g.label]), model.parameters(), eps=1e-6)
    elapsed = time.perf_counter() - t0
    ok = (
        primitive_err[worst_name] < 1e-4
        and pipeline_err < 1e-3
        and margins["eigengap"] > 1e-2
        and elapsed < 30
    )
    _record(
        2,
        ok,
        f"{len(primitive_err)} primitives worst {worst_name} {primitive_err[worst_name]:.1e}, "
        f"pipeline {pipeline_err:.1e} (seed {seed}, eigengap {margins['eigengap']:.3f}), {elapsed:.1f}s",
    )
    assert ok, primitive_err


# ---------------------------------------------------------------------------


def _degenerate_matrices(rng):
    for n in (1, 2, 3, 5, 8, 16):
        yield f"I_{n}", np.eye(n)
    for sizes in ((2, 2), (3, 3, 3), (4, 4, 4, 4), (1, 1, 1, 1, 1)):
        yield f"blocks{sizes}", _blocks(*sizes)
    for n in (4, 9, 16):
        q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        lam = np.repeat([2.0, -1.0], [n // 2, n - n // 2])
        yield f"Q diag(2, -1) Q' n={n}", (q * lam) @ q.T


def test_03_stability():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    cfg = EigBackwardConfig()
    worst = 0.0
    finite = True
    cases = 0
    for _, m in _degenerate_matrices(rng):
        eig = sym_eig(m)
        n = m.shape[0]
        for up_basis, up_values in (
            (rng.normal(size=(n, n)), None),
            (None, rng.normal(size=n)),
            (rng.normal(size=(n, n)), rng.normal(size=n)),
        ):
            g = sym_eig_backward(eig, up_basis, up_values, cfg)
            norm = np.sqrt(
                sum(float(np.sum(u**2)) for u in (up_basis, up_values) if u is not None)
            )
            finite &= bool(np.all(np.isfinite(g)))
            worst = max(worst, float(np.max(np.abs(g))) / (cfg.k_cap * norm))
            cases += 1
    elapsed = time.perf_counter() - t0
    ok = finite and worst <= 1.0 and elapsed < 5
    _record(3, ok, f"{cases} cases, finite {finite}, max |grad| / (k_cap |up|) {worst:.2e}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------


def test_04_equivariance():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    model = GMPoolModel.init(ModelConfig(hidden=16, dropout_p=0.0), 4, 2, seed=4)
    bad = []
    for k in range(100):
        spec = SyntheticSpec(group_count=int(rng.integers(1, 5)), group_size_range=(1, 5), feature_noise=0.5)
        g, _, _ = synthetic_graph(spec, rng)
        perm = rng.permutation(g.n)
        h = permute_graph(g, perm)
        enc_g, enc_h = model.encode(g), model.encode(h)
        m_g, m_h = model.grouping(g, enc_g).values, model.grouping(h, enc_h).values
        if not np.array_equal(enc_h.X_out.values, enc_g.X_out.values[perm]):
            bad.append((k, "node states"))
        if not np.array_equal(enc_h.E_out.values, enc_g.E_out.values[np.ix_(perm, perm)]):
            bad.append((k, "edge states"))
        if not np.array_equal(m_h, m_g[np.ix_(perm, perm)]):
            bad.append((k, "grouping matrix"))
        for t in (0.5, 1.0):
            if effective_clusters(m_g, t) != effective_clusters(m_h, t):
                bad.append((k, f"clusters at {t}"))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 20
    _record(4, ok, f"100 graphs, {len(bad)} violations, {elapsed:.1f}s")
    assert ok, bad[:5]


# ---------------------------------------------------------------------------


def test_05_block_oracle():
    m = _blocks(3, 2, 1)
    op, _ = gmpool_decompose(m)
    lam = op.eig.values
    eig_ok = bool(np.all(np.abs(lam - [3, 2, 1, 0, 0, 0]) <= 1e-8))
    c1, c05 = effective_clusters(m, 1.0), effective_clusters(m, 0.5)
    s = op.S.values
    rows = significant_rows(op)
    blocks = [range(0, 3), range(3, 5), range(5, 6)]
    supports = []
    for r in rows:
        on = [b for b in blocks if np.any(np.abs(s[r, list(b)]) > 1e-8)]
        supports.append(len(on))
    ok = eig_ok and c1 == 2 and c05 == 3 and len(rows) == 3 and supports == [1, 1, 1]
    _record(5, ok, f"eigenvalues {np.round(lam, 12).tolist()}, clusters(1) {c1}, clusters(0.5) {c05}")
    assert ok


# ---------------------------------------------------------------------------


def test_06_ngmpool_identity():
    rng = np.random.default_rng(606)
    m = _blocks(3, 2, 1, 4)
    n = m.shape[0]
    x = rng.normal(size=(n, 5))
    a = np.triu((rng.random((n, n)) < 0.5).astype(float), 1)
    a = a + a.T
    e = rng.normal(size=(n, n, 5)) * a[:, :, None]
    w = ad.constant(rng.normal(size=(5, 5)))

    op, _ = gmpool_decompose(m)
    gm = gmpool_coarsen(x, e, a, op)
    ng = ngmpool_coarsen(x, e, a, m)

    def embed(c, act):
        return dmpnn.readout_mean(act(ad.matmul(c.x, w)), c.ones).values

    linear = lambda t: t  # noqa: E731
    err = float(np.max(np.abs(embed(gm, linear) - embed(ng, linear))))

    # with ReLU message passing on the pooled edges the two paths differ
    post = dmpnn.DenseParams.init(5, np.random.default_rng(1))
    relu_gm = dmpnn.readout_mean(dmpnn.dense_forward(gm.x, gm.e, post, 2, 0.0, False, None), gm.ones).values
    relu_ng = dmpnn.readout_mean(dmpnn.dense_forward(ng.x, ng.e, post, 2, 0.0, False, None), ng.ones).values
    relu_diag = relative_error(relu_gm, relu_ng)

    ok = err <= 1e-10
    _record(6, ok, f"linear max |diff| {err:.1e}; ReLU diagnostic relative discrepancy {relu_diag:.2e}")
    assert ok


# ---------------------------------------------------------------------------


def test_07_iterative():
    t0 = time.perf_counter()
    m = _blocks(2, 2)
    res = iterative_decompose(m, 2, iters=500)
    trace = res.loss_trace
    monotone = all(b <= a for a, b in zip(trace, trace[1:]))
    err = float(np.linalg.norm(m - res.W_raw.T @ res.W_raw))
    elapsed = time.perf_counter() - t0
    ok = err < 1e-3 and monotone and len(trace) - 1 <= 500 and elapsed < 5
    _record(7, ok, f"|M - W'W| {err:.1e} after {len(trace) - 1} iterations, monotone {monotone}, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_08_end_to_end():
    t0 = time.perf_counter()
    ds = generate_synthetic(SyntheticSpec(group_count=4, min_group_count=1, count=200, seed=7, feature_noise=0.0))
    cfg = TrainConfig(lr=1e-4, epochs=200, seed=0, fold_limit=1, model=ModelConfig(hidden=32))
    fold = train(ds, cfg).folds[0]
    first, last = fold.trace[0]["train_loss"], fold.trace[-1]["train_loss"]

    probe = generate_synthetic(SyntheticSpec(group_count=3, count=30, seed=11, feature_noise=0.0))
    counts = [effective_clusters(fold.model.grouping(g).values, 1.0) for g in probe]
    values, freq = np.unique(counts, return_counts=True)
    mode = int(values[np.argmax(freq)])
    elapsed = time.perf_counter() - t0
    ok = last <= 0.5 * first and abs(mode - 3) <= 1 and elapsed < 600
    _record(
        8,
        ok,
        f"train MSE {first:.3f} -> {last:.3f} ({last / first:.0%}), modal clusters {mode} "
        f"(histogram {dict(zip(values.tolist(), freq.tolist()))}), {elapsed:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------------------

CLUSTER_ARG = re.compile(r"cluster|rank|^k$|^r$|num_|n_groups|ratio|pool_size", re.IGNORECASE)


def test_09_rank_adaptivity():
    from dataclasses import fields

    path = [
        pairwise_input,
        grouping_matrix,
        gmpool_decompose,
        gmpool_coarsen,
        ngmpool_coarsen,
        eigh,
        sqrt_clamped_op,
        dmpnn.readout_mean,
        dmpnn.readout_sum,
        GMPoolModel.init,
        GMPoolModel.forward,
        GMPoolModel.grouping,
        batch_loss,
    ]
    offending = [
        f"{fn.__qualname__}({p})" for fn in path for p in inspect.signature(fn).parameters if CLUSTER_ARG.search(p)
    ]
    offending += [f"ModelConfig.{f.name}" for f in fields(ModelConfig) if CLUSTER_ARG.search(f.name)]

    graphs = list(generate_synthetic(SyntheticSpec(group_count=4, min_group_count=1, group_size_range=(1, 5), count=12, seed=9)))
    sizes = sorted({g.n for g in graphs})
    model = GMPoolModel.init(ModelConfig(hidden=8), 4, 2, seed=0)
    loss = batch_loss(model, graphs, "mse")
    ad.backward(loss)
    shapes_ok = all(model.forward(g).pool.shape == (g.n, g.n) for g in graphs)
    finite = all(np.all(np.isfinite(p.grad)) for p in model.parameters())
    ok = not offending and len(sizes) > 1 and shapes_ok and finite
    _record(9, ok, f"no cluster-count argument; one batch with sizes {sizes}, loss {float(loss.values):.3f}")
    assert ok, offending


# ---------------------------------------------------------------------------


def _cli_artifacts(root):
    root.mkdir()
    data = root / "d.jsonl"
    run = root / "run"
    small = ["--hidden", "6", "--steps", "2", "--steps-post", "1", "--folds", "2", "--batch", "8", "--seed", "3"]
    assert main(["synth", "--count", "16", "--seed", "5", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--epochs", "2", "--out-dir", str(run), *small]) == 0
    ckpt = str(run / "fold0.json")
    assert main(["analyze", "--data", str(data), "--checkpoint", ckpt, "--out-dir", str(root / "pgm"), "--heatmaps", "4"]) == 0
    analyze_csv = ["analyze", "--data", str(data), "--checkpoint", ckpt, "--out-dir", str(root / "csv")]
    assert main([*analyze_csv, "--heatmaps", "2", "--heatmap-format", "csv"]) == 0
    (root / "m.csv").write_text("1,0.5,0\n0.5,1,0.25\n0,0.25,1\n")
    assert main(["decompose", "--matrix", str(root / "m.csv"), "--out", str(root / "s.csv")]) == 0
    iterative = ["decompose", "--matrix", str(root / "m.csv"), "--scheme", "iterative", "--seed", "2"]
    assert main([*iterative, "--out", str(root / "w.csv")]) == 0
    # config.json embeds the output directory, which differs between the two runs
    return {
        p.relative_to(root).as_posix(): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "config.json"
    }


def test_10_cli_determinism(tmp_path, capsys):
    a = _cli_artifacts(tmp_path / "a")
    b = _cli_artifacts(tmp_path / "b")
    capsys.readouterr()
    kinds = sorted({name.rsplit(".", 1)[-1] for name in a})
    differing = [k for k in a if a[k] != b.get(k)]
    ok = a.keys() == b.keys() and not differing and {"jsonl", "csv", "pgm"} <= set(kinds)
    _record(10, ok, f"{len(a)} artifacts ({', '.join(kinds)}) byte-identical: {not differing}")
    assert ok, differing
