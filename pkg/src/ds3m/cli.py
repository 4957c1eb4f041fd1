"""Command-line harness: ``ds3m simulate|train|predict|segment|evaluate|report``.

Every command is a deterministic function of its config, input files and seed.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import statistics
import sys
import time
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch

from . import __version__
from . import evaluation as ev
from .baselines import FAMILY_TAG, GruBaselineParams, baseline_predict, baseline_train, init_baseline
from .checkpoint import CheckpointError, assign, load_checkpoint, save_checkpoint
from .config import ModelConfig
from .diffcore import ConfigError, NumericError
from .forecasting import ForecastResult, predict_rolling, segment_probs
from .runconfig import ExperimentConfig, load_config, parse_config
from .simulators import (LabeledSeries, LorenzConfig, ToyConfig, read_series, read_table, simulate_lorenz,
                         simulate_toy, write_series)
from .training import DivergenceError, Normalizer, init_model, make_windows, split_windows, train

log = logging.getLogger("ds3m")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
THREADS_ENV = "DS3M_NUM_THREADS"


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def _claim(path: str | Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise ConfigError(f"output {path} already exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _simulate(name: str, seed: int, length: int | None) -> LabeledSeries:
    if name == "toy":
        return simulate_toy(ToyConfig(seed=seed, **({"length": length} if length else {})))
    if name == "lorenz":
        return simulate_lorenz(LorenzConfig(seed=seed, **({"length": length} if length else {})))
    raise ConfigError(f"unknown simulator {name!r}")


def _load_series(path: str | Path, target_columns=None) -> LabeledSeries:
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    try:
        return read_series(path, list(target_columns) if target_columns else None)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n")


def _clean(obj):
    """Replace non-finite floats with None so the JSON stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    out = _claim(args.out, args.force)
    series = _simulate(args.name, args.seed, args.length)
    write_series(series, out)
    log.info("wrote %d steps to %s", len(series), out)
    return EXIT_OK


# ---------------------------------------------------------------- train

def _model_from_checkpoint(header, tensors):
    if header["family"] == FAMILY_TAG:
        mc = header["model_config"]
        params = init_baseline(mc["input_dim"], mc["hidden_dim"], mc["obs_dim"], 0)
        assign(params.named_tensors(), tensors)
        return params
    cfg = ModelConfig.from_dict(header["model_config"])
    gp, ip = init_model(cfg, 0)
    assign(list(gp.named_tensors()) + list(ip.named_tensors()), tensors)
    return gp, ip


def cmd_train(args) -> int:
    cfg: ExperimentConfig = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = Path(args.out)
    ckpt_path = _claim(out_dir / "model.ckpt", args.force)
    report_path = _claim(out_dir / "train_report.jsonl", args.force)
    manifest_path = _claim(out_dir / "manifest.json", args.force)

    if cfg.data.simulated:
        series = _simulate(cfg.data.source, cfg.seed, cfg.data.length)
        data_path = _claim(out_dir / "data.csv", args.force)
        write_series(series, data_path)
    else:
        data_path = Path(cfg.data.source)
        if not data_path.is_absolute() and not data_path.exists():
            data_path = Path(args.config).parent / data_path
        series = _load_series(data_path, cfg.data.target_columns)

    model_cfg = cfg.model_config(series.y.shape[1])
    try:
        split = split_windows(series.y, cfg.data.window, cfg.data.splits, model_cfg.family)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    tc = cfg.train_config()

    meta = {
        "window": cfg.data.window,
        "splits": list(cfg.data.splits),
        "target_columns": list(cfg.data.target_columns),
        "normalizer_mean": split.normalizer.mean.tolist(),
        "normalizer_std": split.normalizer.std.tolist(),
        "seed": cfg.seed,
    }
    if cfg.kind == "baseline-gru":
        if args.resume:
            raise ConfigError("--resume is only supported for ds3m models")
        params, report = baseline_train(split, tc, model_cfg.hidden_dim)
        named = list(params.named_tensors())
        family = FAMILY_TAG
        mc = {"input_dim": model_cfg.input_dim, "hidden_dim": model_cfg.hidden_dim, "obs_dim": model_cfg.obs_dim,
              "n_regimes": 1, "family": "gaussian"}
    else:
        init, best = None, math.inf
        if args.resume:
            header, tensors = load_checkpoint(args.resume)
            if header["family"] != "ds3m" or ModelConfig.from_dict(header["model_config"]) != model_cfg:
                raise ConfigError(f"checkpoint {args.resume} does not match the configured model")
            init = _model_from_checkpoint(header, tensors)
            best = header["meta"].get("best_val_loss", math.inf)
        gp, ip, report = train(split, model_cfg, tc, init=init, best_val_loss=best)
        named = list(gp.named_tensors()) + list(ip.named_tensors())
        family = "ds3m"
        mc = model_cfg.to_dict()
    meta["best_val_loss"] = report.best_val_loss
    meta["best_epoch"] = report.best_epoch
    save_checkpoint(ckpt_path, family, mc, named, meta)
    with open(report_path, "w") as fh:
        for rec in report.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {
        "code_version": __version__,
        "command": "train",
        "config": cfg.to_ini(),
        "data": str(data_path),
        "checkpoint": str(ckpt_path),
        "train_report": str(report_path),
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "metrics": {},
    }
    _dump_json(manifest_path, _clean(manifest))
    log.info("trained %d epochs in %.1fs (best epoch %d)", len(report.val_loss), report.seconds, report.best_epoch)
    return EXIT_OK


# ---------------------------------------------------------------- predict / segment

def _windows_for(header, series: LabeledSeries, part: str):
    meta = header["meta"]
    windows = make_windows(series.y, meta["window"])
    n_train, n_val, n_test = meta["splits"]
    if part == "test":
        if n_test > len(windows):
            raise DataError(f"data yields {len(windows)} windows, fewer than the {n_test} test windows")
        return windows.subset(slice(len(windows) - n_test, len(windows)))
    if part == "all":
        return windows
    raise ConfigError(f"unknown split {part!r}")


def _normalizer(header) -> Normalizer:
    m = header["meta"]
    return Normalizer(np.asarray(m["normalizer_mean"]), np.asarray(m["normalizer_std"]))


def _baseline_forecasts(params: GruBaselineParams, windows, norm: Normalizer, coverage: float) -> List[ForecastResult]:
    xn = norm.normalize(windows.x)
    mean, logvar = baseline_predict(params, xn[:, :-1], x_next=xn[:, -1])
    z = statistics.NormalDist().inv_cdf(0.5 + coverage / 2.0)
    sd = np.exp(0.5 * logvar)
    lo, hi = norm.denormalize(mean - z * sd), norm.denormalize(mean + z * sd)
    mean = norm.denormalize(mean)
    return [ForecastResult(mean[i], lo[i], hi[i], np.ones(1), mean[i][None]) for i in range(len(mean))]


def cmd_predict(args) -> int:
    out = _claim(args.out, args.force)
    header, tensors = load_checkpoint(args.checkpoint)
    series = _load_series(args.data, header["meta"].get("target_columns") or None)
    if series.y.shape[1] != header["model_config"]["obs_dim"]:
        raise DataError(f"data has {series.y.shape[1]} target columns, model expects {header['model_config']['obs_dim']}")
    windows = _windows_for(header, series, args.split)
    norm = _normalizer(header)
    model = _model_from_checkpoint(header, tensors)
    if header["family"] == FAMILY_TAG:
        results = _baseline_forecasts(model, windows, norm, args.coverage)
    else:
        gp, ip = model
        results = predict_rolling(gp, ip, windows, norm, args.samples, args.coverage, args.seed,
                                  header["model_config"]["family"])
    D = series.y.shape[1]
    K = len(results[0].regime_probs)
    header_row = (["index"] + [f"y{i}" for i in range(D)] + [f"mean{i}" for i in range(D)]
                  + [f"lower{i}" for i in range(D)] + [f"upper{i}" for i in range(D)]
                  + ["regime"] + [f"p{k}" for k in range(K)])
    rows = []
    for t, r, y in zip(windows.target_index, results, windows.y[:, -1, :]):
        rows.append([int(t)] + [_fmt(v) for v in y] + [_fmt(v) for v in r.mean] + [_fmt(v) for v in r.lower]
                    + [_fmt(v) for v in r.upper] + [int(np.argmax(r.regime_probs))]
                    + [_fmt(v) for v in r.regime_probs])
    _write_rows(out, header_row, rows)
    return EXIT_OK


def cmd_segment(args) -> int:
    out = _claim(args.out, args.force)
    header, tensors = load_checkpoint(args.checkpoint)
    if header["family"] != "ds3m":
        raise ConfigError(f"segmentation needs a ds3m checkpoint, got family {header['family']!r}")
    series = _load_series(args.data, header["meta"].get("target_columns") or None)
    if series.y.shape[1] != header["model_config"]["obs_dim"]:
        raise DataError("data dimension does not match the checkpoint")
    windows = _windows_for(header, series, args.split)
    norm = _normalizer(header)
    gp, ip = _model_from_checkpoint(header, tensors)
    x = torch.as_tensor(norm.normalize(windows.x))
    y = torch.as_tensor(norm.normalize(windows.y))
    probs = segment_probs(gp, ip, y, x, args.samples, args.seed, header["model_config"]["family"])[:, -1, :]
    K = probs.shape[-1]
    rows = [[int(t), int(np.argmax(p))] + [_fmt(v) for v in p] for t, p in zip(windows.target_index, probs)]
    _write_rows(out, ["index", "regime"] + [f"p{k}" for k in range(K)], rows)
    return EXIT_OK


# ---------------------------------------------------------------- evaluate / report

def _read_output(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    try:
        header, data = read_table(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if "index" not in header or "regime" not in header:
        raise DataError(f"{path}: not a forecast or segmentation file")
    return header, data


def _truth_labels(path: str | Path | None):
    """``d_true`` column of a series file, or None when there is no labelled truth."""
    if not path:
        return None
    path = Path(path)
    if not path.exists():
        raise DataError(f"truth file not found: {path}")
    try:
        header, data = read_table(path)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if "d_true" not in header:
        return None
    return data[:, header.index("d_true")].astype(int)


def cmd_evaluate(args) -> int:
    if not args.forecast and not args.segmentation:
        raise ConfigError("evaluate needs --forecast and/or --segmentation")
    out = _claim(args.out, args.force)
    labels = _truth_labels(args.truth)
    result = {}
    for kind, path in (("forecast", args.forecast), ("inference", args.segmentation)):
        if not path:
            continue
        header, data = _read_output(path)
        idx = data[:, header.index("index")].astype(int)
        if len(idx) == 0:
            raise DataError(f"{path}: no rows")
        rec = ev.MetricsRecord()
        if labels is not None:
            if idx.min() < 0 or idx.max() >= len(labels):
                raise DataError(f"{path}: indices do not fit the truth file of length {len(labels)}")
            K = sum(1 for h in header if h.startswith("p") and h[1:].isdigit())
            d_pred = data[:, header.index("regime")].astype(int)
            d_true = labels[idx]
            K = max(K, int(d_true.max()) + 1)
            perm, aligned = ev.align_labels(d_pred, d_true, K)
            rec.accuracy = ev.accuracy(aligned, d_true)
            rec.f1 = ev.f1_score(aligned, d_true, K)
            rec.duration_per_regime = ev.mean_durations(aligned, K)
            rec.label_permutation = list(perm)
        if kind == "forecast":
            D = sum(1 for h in header if h.startswith("mean") and h[4:].isdigit())
            try:
                cols = {c: [header.index(f"{c}{i}") for i in range(D)] for c in ("y", "mean", "lower", "upper")}
            except ValueError:
                raise DataError(f"{path}: missing forecast columns") from None
            y_true = data[:, cols["y"]]
            rec.rmse = ev.rmse(y_true, data[:, cols["mean"]])
            rec.mape = ev.mape(y_true, data[:, cols["mean"]])
            rec.extra["coverage"] = float(np.mean((y_true >= data[:, cols["lower"]]) & (y_true <= data[:, cols["upper"]])))
        rec.extra["n"] = int(len(idx))
        d = rec.to_dict()
        if kind == "inference":
            d.pop("rmse"), d.pop("mape")
        result[kind] = _clean(d)
    flat = {f"{kind}.{k}": v for kind, d in result.items() for k, v in d.items()}
    _dump_json(out, flat)
    if args.manifest:
        mpath = Path(args.manifest)
        if not mpath.exists():
            raise DataError(f"manifest not found: {mpath}")
        manifest = json.loads(mpath.read_text())
        manifest.setdefault("metrics", {}).update(flat)
        _dump_json(mpath, manifest)
    return EXIT_OK


def cmd_report(args) -> int:
    out = _claim(args.out, args.force)
    values = {}
    for p in args.metrics:
        path = Path(p)
        if not path.exists():
            raise DataError(f"metrics file not found: {path}")
        for k, v in json.loads(path.read_text()).items():
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                values.setdefault(k, []).append(float(v))
    summary = {}
    for k, vs in sorted(values.items()):
        summary[k] = {"mean": float(np.mean(vs)), "std": float(np.std(vs, ddof=1)) if len(vs) > 1 else 0.0,
                      "median": float(np.median(vs)), "n": len(vs)}
    _dump_json(out, {"runs": [str(p) for p in args.metrics], "summary": summary})
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ds3m", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write a simulated labelled series")
    s.add_argument("name", choices=["toy", "lorenz"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--length", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="fit a model from an experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("predict", cmd_predict, "one-step forecasts for every window"),
                              ("segment", cmd_segment, "regime probabilities for every window")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--samples", type=int, default=100)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--split", default="test", choices=["test", "all"])
        s.add_argument("--force", action="store_true")
        if name == "predict":
            s.add_argument("--coverage", type=float, default=0.9)
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", parents=[common], help="score forecast/segmentation files against a truth file")
    s.add_argument("--forecast", default=None)
    s.add_argument("--segmentation", default=None)
    s.add_argument("--truth", default=None, help="series file with a d_true column")
    s.add_argument("--out", required=True)
    s.add_argument("--manifest", default=None, help="run manifest to record the metrics in")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="aggregate metrics files (mean, std, median)")
    s.add_argument("metrics", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    if getattr(args, "samples", 1) < 1 or not 0 < getattr(args, "coverage", 0.5) < 1:
        print("error: need --samples >= 1 and 0 < --coverage < 1", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    try:
        code = args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericError) as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
