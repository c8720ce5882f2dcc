"""Losses, Adam, metrics and the k-fold training protocol."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .graph_data import Dataset, kfold_split
from .model import ADAM_DEFAULTS, GMPoolModel, ModelConfig

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainingDivergence",
    "FoldResult",
    "TrainResult",
    "loss_mse",
    "loss_bce",
    "adam_step",
    "metric",
    "batch_loss",
    "evaluate",
    "train_fold",
    "train",
    "write_trace_csv",
]

log = logging.getLogger(__name__)

# per-dataset learning rates of the original experiments
DATASET_LR = {"plqy": 1e-4, "lambda_max_films": 1e-5, "lambda_max_solvents": 1e-5, "pic50": 5e-5, "tox21": 1e-4}


class TrainingDivergence(FloatingPointError):
    def __init__(self, fold: int, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"non-finite loss in fold {fold}, epoch {epoch}, batch {batch}" + (f": {detail}" if detail else ""))
        self.fold, self.epoch, self.batch = fold, epoch, batch


# ---------------------------------------------------------------------------
# losses


def loss_mse(pred: ad.Tensor, target) -> ad.Tensor:
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    if pred.values.size == 0:
        raise ValueError("empty batch")
    d = ad.sub(pred, ad.constant(target))
    sq = ad.mul(d, d)
    return ad.scale(ad.sum_all(ad.reshape(sq, (1, -1))), 1.0 / sq.values.size)


def loss_bce(logit: ad.Tensor, target) -> ad.Tensor:
    """Mean of ``log(1 + exp(-(2t - 1) * logit))`` in overflow-free form."""
    logit = ad.as_tensor(logit)
    t = np.asarray(target, dtype=np.float64).reshape(logit.shape)
    if logit.values.size == 0:
        raise ValueError("empty batch")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("BCE targets must be 0 or 1")
    z = (1.0 - 2.0 * t) * logit.values  # = -(2t - 1) * logit
    # softplus(z) = max(z, 0) + log1p(exp(-|z|))
    vals = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    dz_dlogit = 1.0 - 2.0 * t
    return ad.custom([logit], np.asarray(vals.sum() / n), lambda g: (float(g) * sig * dz_dlogit / n,), "bce")


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = ADAM_DEFAULTS["beta1"]
    beta2: float = ADAM_DEFAULTS["beta2"]
    eps: float = ADAM_DEFAULTS["eps"]

    @classmethod
    def for_params(cls, params: Sequence[ad.Tensor]) -> AdamState:
        return cls([np.zeros_like(p.values) for p in params], [np.zeros_like(p.values) for p in params])


def adam_step(params: Sequence[ad.Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state are misaligned")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# metrics


def metric(pred, target, kind: str) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError("pred and target must be non-empty and equally long")
    if kind == "rmse":
        return float(np.sqrt(np.mean((pred - target) ** 2)))
    if kind == "roc_auc":
        pos = target == 1
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            raise ValueError("roc_auc needs both classes")
        ranks = rankdata(pred)  # average ranks count ties as half
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        return float(u / (n_pos * n_neg))
    raise ValueError(f"unknown metric {kind!r}")


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 80
    epochs: int = 100
    loss: str = "mse"
    seed: int = 0
    folds: int = 5
    test_fraction: float = 0.10
    fold_limit: int | None = None  # train only the first k folds
    parallel_folds: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss not in ("mse", "bce"):
            raise ValueError("loss must be 'mse' or 'bce'")

    @property
    def metric_kind(self) -> str:
        return "rmse" if self.loss == "mse" else "roc_auc"


@dataclass
class FoldResult:
    fold: int
    model: GMPoolModel
    best_epoch: int | None
    trace: list[dict]
    valid_metric: float | None
    test_metric: float | None


@dataclass
class TrainResult:
    folds: list[FoldResult]
    config: TrainConfig

    @property
    def trace(self) -> list[dict]:
        return [row for f in self.folds for row in f.trace]

    @property
    def test_metrics(self) -> list[float | None]:
        return [f.test_metric for f in self.folds]


def _loss_fn(kind: str):
    return loss_mse if kind == "mse" else loss_bce


def batch_loss(model: GMPoolModel, graphs, kind: str, training: bool = False, rng=None) -> ad.Tensor:
    preds = [model.forward(g, training, rng).prediction for g in graphs]
    return _loss_fn(kind)(_stack(preds), [g.label for g in graphs])


def _stack(preds: list[ad.Tensor]) -> ad.Tensor:
    n = len(preds)

    def bw(g):
        return [g[k : k + 1] for k in range(n)]

    return ad.custom(preds, np.concatenate([p.values for p in preds]), bw, "stack")


def evaluate(model: GMPoolModel, ds: Dataset, kind: str) -> tuple[float, float | None]:
    """Eval-mode loss and metric over a dataset."""
    if len(ds) == 0:
        return float("nan"), None
    pred = model.predict(ds.graphs)
    y = ds.labels
    loss = float(_loss_fn(kind)(ad.constant(pred), y).values)
    mkind = "rmse" if kind == "mse" else "roc_auc"
    try:
        score = metric(pred, y, mkind)
    except ValueError:
        score = None
    return loss, score


def train_fold(
    train_ds: Dataset,
    valid_ds: Dataset,
    cfg: TrainConfig,
    fold: int = 0,
    seed_seq: np.random.SeedSequence | None = None,
    test_ds: Dataset | None = None,
) -> FoldResult:
    seed_seq = seed_seq or np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed, drop_seed = (int(s.generate_state(1)[0]) for s in seed_seq.spawn(3))
    model = GMPoolModel.init(cfg.model, train_ds.d_n, train_ds.d_e, seed=init_seed)
    if cfg.loss == "mse" and len(train_ds):
        model.params["head.b"].values[...] = train_ds.labels.mean()
    params = model.parameters()
    state = AdamState.for_params(params)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    drop_rng = np.random.default_rng(drop_seed)
    trace: list[dict] = []
    best = (math.inf, None, model.state())
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            graphs = [train_ds.graphs[i] for i in order[start : start + cfg.batch_size]]
            ad.zero_grad(params)
            try:
                loss = batch_loss(model, graphs, cfg.loss, True, drop_rng)
                ad.backward(loss)
            except (ad.NonFiniteError, FloatingPointError) as exc:
                raise TrainingDivergence(fold, epoch, b, str(exc)) from exc
            value = float(loss.values)
            grads = [p.grad for p in params]
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergence(fold, epoch, b)
            adam_step(params, grads, state, cfg.lr)
            total += value * len(graphs)
        valid_loss, valid_metric = evaluate(model, valid_ds, cfg.loss)
        trace.append(
            {
                "epoch": epoch,
                "fold": fold,
                "train_loss": total / max(n, 1),
                "valid_loss": valid_loss,
                "metric": valid_metric,
            }
        )
        log.debug("fold %d epoch %d train %.5g valid %.5g", fold, epoch, total / max(n, 1), valid_loss)
        if valid_loss < best[0] or best[1] is None:
            best = (valid_loss, epoch, model.state())
    model.load_state(best[2])
    valid_metric = evaluate(model, valid_ds, cfg.loss)[1] if len(valid_ds) else None
    test_metric = evaluate(model, test_ds, cfg.loss)[1] if test_ds is not None and len(test_ds) else None
    return FoldResult(fold, model, best[1], trace, valid_metric, test_metric)


def train(ds: Dataset, cfg: TrainConfig) -> TrainResult:
    """k-fold protocol: a uniformly sampled test set is held out first, then
    each fold trains on the remaining folds and selects its best epoch by
    validation loss."""
    if cfg.loss == "bce" and ds.task != "classification":
        raise ValueError("bce loss needs a classification dataset")
    if cfg.loss == "mse" and ds.task != "regression":
        raise ValueError("mse loss needs a regression dataset")
    test, folds = kfold_split(ds, cfg.folds, cfg.test_fraction, cfg.seed)
    if cfg.fold_limit is not None:
        folds = folds[: cfg.fold_limit]
    seqs = np.random.SeedSequence(cfg.seed).spawn(len(folds))
    jobs = [(tr, va, cfg, k, seqs[k], test) for k, (tr, va) in enumerate(folds)]
    if cfg.parallel_folds > 1:
        with ThreadPoolExecutor(cfg.parallel_folds) as pool:
            results = list(pool.map(lambda a: train_fold(*a), jobs))
    else:
        results = [train_fold(*a) for a in jobs]
    return TrainResult(results, cfg)


def write_trace_csv(rows: Sequence[dict], path: str | os.PathLike) -> None:
    cols = ["epoch", "fold", "train_loss", "valid_loss", "metric"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else (format(r[c], ".17g") if isinstance(r[c], float) else r[c]) for c in cols])
