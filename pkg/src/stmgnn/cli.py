"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
Every command writes its outputs only after all of them have been computed,
so a failed run leaves no partial files behind.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .baselines import evaluate_point_model, historical_value
from .config import RunConfig
from .distributions import HeadKind
from .errors import ConfigError, DataError, StmgnnError, TrainingDiverged
from .graph import build_grid_adjacency, transition_matrix
from .metrics import evaluate_distribution
from .model import forward, load_weights, save_weights, summarize
from .training import split_windows, stack, train

log = logging.getLogger("stmgnn")


def _fmt(x):
    return f"{float(x):.10g}"


def _emit(out_dir, files):
    """Write ``{name: str | bytes}`` into ``out_dir`` (created on demand)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, content in files.items():
        path = out_dir / name
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content)


def _input_path(cli_value, config_value, what):
    path = cli_value or config_value
    if not path:
        raise ConfigError(f"no {what} given (argument or config key)")
    if not Path(path).is_file():
        raise DataError(f"{what} file not found: {path}")
    return str(path)


def _graph(cfg, tensor):
    return transition_matrix(build_grid_adjacency(tensor.grid, cfg.adjacency, cfg.self_loops))


def _batched_forward(inputs, transition, weights, model_config, batch=64):
    outs = [forward(inputs[i : i + batch], transition, weights, model_config) for i in range(0, len(inputs), batch)]
    params = type(outs[0].params)(*(np.concatenate(parts) for parts in zip(*(o.params for o in outs))))
    raw = np.concatenate([o.raw for o in outs])
    return type(outs[0])(outs[0].kind, params, raw)


def _prediction_table(summary, names, days=None):
    """CSV rows; ``days`` adds a leading column with each window's first target day."""
    arrays = [*summary.params, summary.mean, summary.q10, summary.q90]
    arrays = [np.asarray(a) if days is not None else np.asarray(a)[None] for a in arrays]
    header = ["region", "step", "category", *summary.params._fields, "mean", "q10", "q90"]
    lines = [",".join((["day"] if days is not None else []) + header)]
    for idx in np.ndindex(arrays[0].shape):
        w, i, s, j = idx
        row = [str(days[w])] if days is not None else []
        row += [str(i), str(s), names[j], *(_fmt(a[idx]) for a in arrays)]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _grid_text(values, grid):
    rows = np.asarray(values).reshape(grid.rows, grid.cols)
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in rows) + "\n"


def _date(text, fallback):
    return dt.date.fromisoformat(text) if text else fallback


# ---------------------------------------------------------------------------
# Commands


def cmd_ingest(args, cfg):
    path = _input_path(args.events, cfg.events, "events")
    log_ = data_mod.load_events(path, cfg.event_schema())
    days_seen = [r.day for r in log_.records]
    start = _date(cfg.start_date, min(days_seen) if days_seen else dt.date(1970, 1, 1))
    n_days = cfg.days or ((max(days_seen) - start).days + 1 if days_seen else 1)
    tensor, report = data_mod.rasterize(log_.records, cfg.grid(), start, max(n_days, 1), log_.categories)
    stats = data_mod.dataset_stats(tensor)
    resolved = cfg.replace(
        events=path, start_date=start.isoformat(), days=tensor.n_days,
        categories=",".join(log_.categories),
    )
    ingest_report = (
        f"records {len(log_.records)}\nmalformed {len(log_.malformed)}\n"
        f"in_bounds {report.in_bounds}\nout_of_grid {report.out_of_grid}\n"
        f"out_of_span {report.out_of_span}\nunknown_category {report.unknown_category}\n"
    )
    ingest_report += "".join(f"malformed_line {line} {reason}\n" for line, reason in log_.malformed)
    tensor_path = Path(args.out) / "counts.txt"
    files = {"stats.txt": stats.to_text(), "ingest_report.txt": ingest_report, "config.txt": resolved.echo_with_hash()}
    _emit(args.out, files)
    data_mod.write_tensor(tensor, tensor_path)
    sys.stdout.write(stats.to_text())
    if log_.malformed:
        print(f"{len(log_.malformed)} malformed rows (see ingest_report.txt)", file=sys.stderr)


def cmd_synth(args, cfg):
    sc = cfg.synth_config()
    tensor, truth = data_mod.synthesize(sc, cfg.seed)
    lines = ["region,category,pi,p,r"]
    for i in range(truth.pi.shape[0]):
        for c in range(truth.pi.shape[1]):
            lines.append(f"{i},{tensor.categories[c]},{truth.pi[i, c]!r},{truth.p[i, c]!r},{truth.r[i, c]!r}")
    files = {
        "truth.csv": "\n".join(lines) + "\n",
        "truth_pi.txt": _grid_text(truth.pi.mean(axis=1), tensor.grid),
        "config.txt": cfg.echo_with_hash(),
    }
    _emit(args.out, files)
    data_mod.write_tensor(tensor, Path(args.out) / "counts.txt")


def _load_tensor(args, cfg):
    path = _input_path(args.tensor, cfg.tensor, "tensor")
    return path, data_mod.read_tensor(path)


def cmd_train(args, cfg):
    tensor_path, tensor = _load_tensor(args, cfg)
    mc = cfg.model_config(tensor.grid.n_regions, len(tensor.categories))
    split = data_mod.chrono_split(tensor, mc.window, mc.horizon, cfg.val_days)
    windows = split_windows(tensor.counts, split, mc.window, mc.horizon)
    transition = _graph(cfg, tensor)
    resolved = cfg.replace(tensor=tensor_path)
    try:
        best, history = train(windows, transition, mc, cfg.train_config())
    except TrainingDiverged as exc:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_weights(out / "checkpoint.bin", exc.checkpoint, mc)
        print(f"last finite checkpoint: {out / 'checkpoint.bin'}", file=sys.stderr)
        raise
    _emit(args.out, {"history.txt": history.to_text(), "timing.txt": history.timing_text(),
                     "config.txt": resolved.echo_with_hash()})
    save_weights(Path(args.out) / "weights.bin", best, mc)
    print(f"best epoch {history.best_epoch} val_nll {history.best_val_nll:.6f}")


def _load_model(args, cfg, tensor):
    weights_path = _input_path(args.weights, cfg.weights, "weights")
    mc = cfg.model_config(tensor.grid.n_regions, len(tensor.categories))
    return weights_path, mc, load_weights(weights_path, mc)


def _test_windows(cfg, tensor, mc):
    split = data_mod.chrono_split(tensor, mc.window, mc.horizon, cfg.val_days)
    return split, split_windows(tensor.counts, split, mc.window, mc.horizon)["test"]


def cmd_evaluate(args, cfg):
    tensor_path, tensor = _load_tensor(args, cfg)
    weights_path, mc, weights = _load_model(args, cfg, tensor)
    split, windows = _test_windows(cfg, tensor, mc)
    if not windows:
        raise DataError("test split holds no complete window")
    inputs, targets = stack(windows)
    output = _batched_forward(inputs, _graph(cfg, tensor), weights, mc)
    head = mc.head_impl()
    meta = {
        "head": mc.head.value,
        "cells": targets.size,
        "train_days": f"{split.train[0]}-{split.train[1] - 1}",
        "val_days": f"{split.val[0]}-{split.val[1] - 1}",
        "test_days": f"{split.test[0]}-{split.test[1] - 1}",
        "seed": cfg.seed,
        "config_sha256": cfg.content_hash(),
    }
    report = evaluate_distribution(head, output.params, targets, meta)
    hv = historical_value(inputs, mc.horizon, cfg.hv_mode)
    baseline = evaluate_point_model(hv, targets, {**meta, "head": f"historical_value:{cfg.hv_mode}"})
    summary = summarize(output, mc)
    resolved = cfg.replace(tensor=tensor_path, weights=weights_path)
    _emit(args.out, {
        "report.txt": report.to_text(),
        "baseline_report.txt": baseline.to_text(),
        "predictions.csv": _prediction_table(summary, tensor.categories, [w.target_day for w in windows]),
        "config.txt": resolved.echo_with_hash(),
    })
    sys.stdout.write(report.to_text())


def _last_window(tensor, mc):
    if tensor.n_days < mc.window:
        raise DataError(f"tensor holds {tensor.n_days} days, window needs {mc.window}")
    return tensor.counts[:, -mc.window :, :].astype(float)


def cmd_predict(args, cfg):
    tensor_path, tensor = _load_tensor(args, cfg)
    weights_path, mc, weights = _load_model(args, cfg, tensor)
    output = forward(_last_window(tensor, mc), _graph(cfg, tensor), weights, mc)
    resolved = cfg.replace(tensor=tensor_path, weights=weights_path)
    _emit(args.out, {
        "predictions.csv": _prediction_table(summarize(output, mc), tensor.categories),
        "config.txt": resolved.echo_with_hash(),
    })


def cmd_export_pi(args, cfg):
    tensor_path, tensor = _load_tensor(args, cfg)
    weights_path, mc, weights = _load_model(args, cfg, tensor)
    if mc.head is not HeadKind.ZINB:
        raise ConfigError(f"export-pi needs the zinb head, config has {mc.head.value}")
    transition = _graph(cfg, tensor)
    if args.last:
        pi = forward(_last_window(tensor, mc), transition, weights, mc).params.pi[None]
    else:
        _, windows = _test_windows(cfg, tensor, mc)
        if not windows:
            raise DataError("test split holds no complete window")
        pi = _batched_forward(stack(windows)[0], transition, weights, mc).params.pi
    per_category = pi.mean(axis=(0, 2))  # (N, C)
    files = {"pi.txt": _grid_text(per_category.mean(axis=1), tensor.grid)}
    for c, name in enumerate(tensor.categories):
        files[f"pi_{name}.txt"] = _grid_text(per_category[:, c], tensor.grid)
    files["config.txt"] = cfg.replace(tensor=tensor_path, weights=weights_path).echo_with_hash()
    _emit(args.out, files)


def cmd_stats(args, cfg):
    _, tensor = _load_tensor(args, cfg)
    text = data_mod.dataset_stats(tensor).to_text()
    if args.out_given:
        _emit(args.out, {"stats.txt": text})
    sys.stdout.write(text)


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stmgnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="rasterize an event log")
    p.add_argument("events", nargs="?")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="draw a synthetic ZINB tensor")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="fit the model")
    p.add_argument("tensor", nargs="?")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("evaluate", cmd_evaluate, "score the test split"),
        ("predict", cmd_predict, "forecast from the last window"),
        ("export-pi", cmd_export_pi, "write the zero-inflation surface"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("weights", nargs="?")
        p.add_argument("tensor", nargs="?")
        if name == "export-pi":
            p.add_argument("--last", action="store_true", help="use only the final window")
        p.set_defaults(func=func)

    p = sub.add_parser("stats", parents=[common], help="per-category totals and zero rates")
    p.add_argument("tensor", nargs="?")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.out_given = args.out is not None
    args.out = args.out or "out"
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        args.func(args, cfg)
    except StmgnnError as exc:
        print(f"stmgnn {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"stmgnn {args.command}: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
