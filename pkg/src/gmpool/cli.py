"""Command-line interface: ``gmpool {synth,train,eval,analyze,decompose,selftest}``.

Exit codes: 0 success, 1 runtime or I/O error, 2 usage error.  Settings come
from built-in defaults, then an optional ``--config`` JSON file, then flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, training
from .graph_data import SyntheticSpec, filter_by_size, generate_synthetic, load_jsonl, save_jsonl
from .model import GMPoolModel, ModelConfig
from .pooling import effective_clusters, gmpool_decompose, iterative_decompose

__all__ = ["main", "build_parser", "UsageError"]

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    """Invalid flag or config value."""


DEFAULTS: dict[str, dict] = {
    "synth": {
        "groups": 3,
        "min_groups": None,
        "size_min": 3,
        "size_max": 5,
        "bridges": 1,
        "noise": 0.1,
        "rule": "group_count",
        "count": 100,
        "d_n": 4,
        "d_e": 2,
        "seed": 0,
        "out": None,
    },
    "train": {
        "data": None,
        "task": "regression",
        "pooling": "gmpool",
        "lr": 1e-4,
        "epochs": 100,
        "batch": 80,
        "seed": 0,
        "folds": 5,
        "fold_limit": None,
        "test_fraction": 0.1,
        "parallel_folds": 1,
        "hidden": 200,
        "steps": 4,
        "steps_post": 2,
        "dropout": 0.15,
        "readout": "mean",
        "clamp_diagonal": False,
        "eigengap_floor": 1e-4,
        "min_nodes": None,
        "max_nodes": None,
        "out_dir": None,
    },
    "eval": {"data": None, "task": "regression", "checkpoint": None, "out": None},
    "analyze": {
        "data": None,
        "task": "regression",
        "checkpoint": None,
        "thresholds": list(analysis.DEFAULT_THRESHOLDS),
        "heatmaps": 10,
        "heatmap_format": "pgm",
        "out_dir": None,
    },
    "decompose": {
        "matrix": None,
        "scheme": "eigen",
        "rank": None,
        "iters": 500,
        "tol": 1e-12,
        "seed": 0,
        "out": None,
    },
    "selftest": {},
}

REQUIRED = {
    "synth": ("out",),
    "train": ("data", "out_dir"),
    "eval": ("data", "checkpoint"),
    "analyze": ("data", "checkpoint", "out_dir"),
    "decompose": ("matrix", "out"),
    "selftest": (),
}


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _flag(p: argparse.ArgumentParser, name: str, **kw) -> None:
    # default None marks "not given", so file values are only overridden by explicit flags
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmpool", description="Grouping-matrix graph pooling toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        if name != "selftest":
            _flag(p, "config", help="JSON file of settings; flags take precedence")
        return p

    p = cmd("synth", "generate a synthetic grouped-graph dataset")
    _flag(p, "groups", type=int, help="groups per graph (maximum when --min-groups is set)")
    _flag(p, "min_groups", type=int, help="draw the group count uniformly from [min, groups]")
    _flag(p, "size_min", type=int)
    _flag(p, "size_max", type=int)
    _flag(p, "bridges", type=int, help="bridge edges per pair of groups")
    _flag(p, "noise", type=float, help="node-feature noise standard deviation")
    _flag(p, "rule", choices=["group_count", "group_feature_sum"])
    _flag(p, "count", type=int)
    _flag(p, "d_n", type=int)
    _flag(p, "d_e", type=int)
    _flag(p, "seed", type=int)
    _flag(p, "out", help="output JSONL path")

    p = cmd("train", "k-fold training")
    _flag(p, "data", help="JSONL dataset")
    _flag(p, "task", choices=["regression", "classification"])
    _flag(p, "pooling", choices=["gmpool", "ngmpool", "none"])
    _flag(p, "lr", type=float)
    _flag(p, "epochs", type=int)
    _flag(p, "batch", type=int)
    _flag(p, "seed", type=int)
    _flag(p, "folds", type=int)
    _flag(p, "fold_limit", type=int, help="train only the first k folds")
    _flag(p, "test_fraction", type=float)
    _flag(p, "parallel_folds", type=int)
    _flag(p, "hidden", type=int)
    _flag(p, "steps", type=int, help="message-passing steps before pooling")
    _flag(p, "steps_post", type=int, help="message-passing steps after pooling")
    _flag(p, "dropout", type=float)
    _flag(p, "readout", choices=["mean", "sum"])
    p.add_argument("--clamp-diagonal", dest="clamp_diagonal", action="store_const", const=True, default=None)
    _flag(p, "eigengap_floor", type=float)
    _flag(p, "min_nodes", type=int)
    _flag(p, "max_nodes", type=int)
    _flag(p, "out_dir")

    p = cmd("eval", "evaluate a checkpoint on a dataset")
    _flag(p, "data")
    _flag(p, "task", choices=["regression", "classification"])
    _flag(p, "checkpoint")
    _flag(p, "out", help="write the metrics JSON here as well as to stdout")

    p = cmd("analyze", "effective-cluster histogram and grouping heatmaps")
    _flag(p, "data")
    _flag(p, "task", choices=["regression", "classification"])
    _flag(p, "checkpoint")
    _flag(p, "thresholds", type=_floats, help="comma-separated eigenvalue thresholds")
    _flag(p, "heatmaps", type=int, help="number of graphs to export heatmaps for")
    _flag(p, "heatmap_format", choices=["pgm", "csv"])
    _flag(p, "out_dir")

    p = cmd("decompose", "square-root decomposition of a matrix CSV")
    _flag(p, "matrix", help="CSV matrix")
    _flag(p, "scheme", choices=["eigen", "iterative"])
    _flag(p, "rank", type=int, help="rank of the iterative scheme (default n)")
    _flag(p, "iters", type=int)
    _flag(p, "tol", type=float)
    _flag(p, "seed", type=int)
    _flag(p, "out", help="output CSV of S; a JSON report is written next to it")

    cmd("selftest", "run the embedded invariant checks")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the ``--config`` file and explicit flags."""
    cfg = dict(DEFAULTS[command])
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for '{command}': {', '.join(unknown)}")
        cfg.update(data)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def _echo(cfg: dict, command: str) -> None:
    print(json.dumps({"command": command, "config": cfg}, sort_keys=True))


def _write_json(obj, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: dict) -> int:
    try:
        spec = SyntheticSpec(
            group_count=cfg["groups"],
            group_size_range=(cfg["size_min"], cfg["size_max"]),
            inter_group_edges=cfg["bridges"],
            feature_noise=cfg["noise"],
            target_rule=cfg["rule"],
            seed=cfg["seed"],
            count=cfg["count"],
            d_n=cfg["d_n"],
            d_e=cfg["d_e"],
            min_group_count=cfg["min_groups"],
        )
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    ds = generate_synthetic(spec)
    save_jsonl(ds, cfg["out"])
    print(f"wrote {len(ds)} graphs to {cfg['out']}")
    return EXIT_OK


def _train_config(cfg: dict) -> training.TrainConfig:
    try:
        model = ModelConfig(
            hidden=cfg["hidden"],
            steps=cfg["steps"],
            steps_post=cfg["steps_post"],
            dropout_p=cfg["dropout"],
            pooling=cfg["pooling"],
            readout=cfg["readout"],
            clamp_diagonal=bool(cfg["clamp_diagonal"]),
            eigengap_floor=cfg["eigengap_floor"],
        )
        if cfg["parallel_folds"] < 1:
            raise ValueError("parallel_folds must be >= 1")
        if cfg["fold_limit"] is not None and cfg["fold_limit"] < 1:
            raise ValueError("fold_limit must be >= 1")
        return training.TrainConfig(
            lr=cfg["lr"],
            batch_size=cfg["batch"],
            epochs=cfg["epochs"],
            loss="mse" if cfg["task"] == "regression" else "bce",
            seed=cfg["seed"],
            folds=cfg["folds"],
            test_fraction=cfg["test_fraction"],
            fold_limit=cfg["fold_limit"],
            parallel_folds=cfg["parallel_folds"],
            model=model,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(cfg: dict) -> int:
    tcfg = _train_config(cfg)
    ds = load_jsonl(cfg["data"], cfg["task"])
    ds = filter_by_size(ds, cfg["min_nodes"], cfg["max_nodes"])
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg, out / "config.json")
    result = training.train(ds, tcfg)
    summary = {"folds": []}
    for f in result.folds:
        meta = {"fold": f.fold, "best_epoch": f.best_epoch, "valid_metric": f.valid_metric, "test_metric": f.test_metric}
        f.model.save(out / f"fold{f.fold}.json", extra=meta)
        summary["folds"].append(meta)
    training.write_trace_csv(result.trace, out / "metrics.csv")
    tests = [m for m in result.test_metrics if m is not None]
    summary["metric"] = tcfg.metric_kind
    summary["test_mean"] = float(np.mean(tests)) if tests else None
    summary["test_std"] = float(np.std(tests)) if tests else None
    _write_json(summary, out / "summary.json")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    ds = load_jsonl(cfg["data"], cfg["task"])
    model = GMPoolModel.load(cfg["checkpoint"])
    kind = "mse" if cfg["task"] == "regression" else "bce"
    loss, score = training.evaluate(model, ds, kind)
    report = {"graphs": len(ds), "loss": loss, "metric": "rmse" if kind == "mse" else "roc_auc", "value": score}
    print(json.dumps(report, sort_keys=True))
    if cfg["out"]:
        _write_json(report, cfg["out"])
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    thresholds = [float(t) for t in cfg["thresholds"]]
    if cfg["heatmaps"] < 0:
        raise UsageError("heatmaps must be >= 0")
    if cfg["heatmap_format"] not in ("pgm", "csv"):
        raise UsageError("heatmap_format must be 'pgm' or 'csv'")
    ds = load_jsonl(cfg["data"], cfg["task"])
    model = GMPoolModel.load(cfg["checkpoint"])
    if model.config.pooling == "none":
        raise UsageError("checkpoint has no grouping classifier (pooling 'none')")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg, out / "config.json")
    hist = analysis.histogram(ds, model, thresholds) if thresholds else None
    report = analysis.cluster_report(ds, model, thresholds)
    if hist is not None:
        report["histogram"] = hist.to_dict()
    _write_json(report, out / "histogram.json")
    ext = cfg["heatmap_format"]
    for i, m in enumerate(analysis.grouping_matrices(ds.graphs[: cfg["heatmaps"]], model)):
        analysis.export_heatmap(m, out / f"grouping_{i:04d}.{ext}", ext)
    print(json.dumps({k: report[k] for k in ("graphs", "mean_nodes", "thresholds")}, sort_keys=True))
    return EXIT_OK


def cmd_decompose(cfg: dict) -> int:
    if cfg["scheme"] not in ("eigen", "iterative"):
        raise UsageError("scheme must be 'eigen' or 'iterative'")
    m = analysis.read_matrix_csv(cfg["matrix"])
    n = m.shape[0]
    if m.shape != (n, n):
        raise UsageError(f"matrix must be square, got {m.shape}")
    if not np.allclose(m, m.T, atol=1e-9):
        raise UsageError("matrix must be symmetric")
    m = 0.5 * (m + m.T)
    report: dict = {"n": n, "scheme": cfg["scheme"]}
    if cfg["scheme"] == "eigen":
        op, d = gmpool_decompose(m)
        s = op.S.values
        report["eigenvalues"] = op.eig.values.tolist()
        report["effective_clusters"] = effective_clusters(op.eig)
    else:
        rank = n if cfg["rank"] is None else cfg["rank"]
        if not 1 <= rank <= n:
            raise UsageError(f"rank must lie in [1, {n}], got {rank}")
        if np.any(m < 0):
            raise UsageError("the iterative scheme needs a non-negative matrix")
        if cfg["iters"] < 0:
            raise UsageError("iters must be >= 0")
        res = iterative_decompose(m, rank, cfg["iters"], cfg["tol"], cfg["seed"])
        s = res.W_raw
        report.update(rank=rank, iterations=len(res.loss_trace) - 1, loss_trace=res.loss_trace)
        analysis.write_matrix_csv(res.W, Path(cfg["out"]).with_suffix(".normalized.csv"))
    report["reconstruction_error"] = float(np.linalg.norm(s.T @ s - m))
    analysis.write_matrix_csv(s, cfg["out"])
    _write_json(report, Path(cfg["out"]).with_suffix(".json"))
    print(json.dumps({k: v for k, v in report.items() if k != "loss_trace"}, sort_keys=True))
    return EXIT_OK


def cmd_selftest(cfg: dict) -> int:
    from .selftest import format_table, run_selftest

    results = run_selftest()
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "decompose": cmd_decompose,
    "selftest": cmd_selftest,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        _echo(cfg, args.command)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"gmpool {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        msg = f"no such file: {exc.filename}" if exc.filename else str(exc)
        print(f"gmpool {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"gmpool {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
