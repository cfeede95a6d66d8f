"""``dkgp`` command-line interface.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from ._io import atomic_write_json, atomic_write_text
from .data import (
    Dataset,
    ecdf_fit,
    ecdf_transform,
    load_csv,
    load_registry,
    partition,
    rmse,
    step_data,
)
from .errors import ConfigError, DkgpError, ParseError, ShapeMismatch, TooFewRows, UnknownModel
from .features import MODEL_NAMES, feature_spec_for, init_feature, model_param_count
from .gp import gp_nll
from .kernels import DeepKernelParams, KernelHyperparams
from .train import TrainConfig, fit, predict, resolve_mode, save_checkpoint

log = logging.getLogger("dkgp")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_TRAIN_OPTIONS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lr0": {"type": "number", "exclusiveMinimum": 0},
        "decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "epochs": {"type": "integer", "minimum": 0},
        "patience": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "adam_beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_eps": {"type": "number", "exclusiveMinimum": 0},
        "scalable_mode": {"enum": ["exact", "kiss", "skip", "auto"]},
        "grid_m_per_dim": {"type": "integer", "minimum": 4},
        "grid_rebuild_every": {"type": "integer", "minimum": 1},
        "lanczos_rank": {"type": "integer", "minimum": 1},
        "clip_norm": {"type": "number", "exclusiveMinimum": 0},
        "l1": {"type": "number", "minimum": 0},
    },
}
_WIDTHS = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}
_COMMON = {
    "registry": {"type": "string"},
    "partitions": {"type": "integer", "minimum": 1},
    "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "seed": {"type": "integer"},
    "ecdf": {"type": "boolean"},
    "init_noise_variance": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "train": _TRAIN_OPTIONS,
}

#: JSON schema of ``dkgp train`` configuration files.
TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "model"],
    "properties": {
        "dataset": {"type": "string"},
        "model": {"enum": list(MODEL_NAMES)},
        "hidden": _WIDTHS,
        **_COMMON,
    },
}

#: JSON schema of ``dkgp benchmark`` configuration files.
BENCHMARK_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["datasets", "models"],
    "properties": {
        "datasets": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "models": {"type": "array", "items": {"enum": list(MODEL_NAMES)}, "minItems": 1},
        "hidden": {"type": "object", "additionalProperties": _WIDTHS},
        **_COMMON,
    },
}

METRICS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["train_nll", "test_rmse", "epochs_run", "best_epoch"],
    "properties": {
        "train_nll": {"type": "number"},
        "test_rmse": {"type": "number", "minimum": 0},
        "epochs_run": {"type": "integer", "minimum": 0},
        "best_epoch": {"type": "integer", "minimum": -1},
        "mode": {"enum": ["exact", "kiss", "skip"]},
    },
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["rows"],
    "properties": {
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["dataset", "model", "status", "param_count", "wall_time_seconds"],
                "properties": {
                    "dataset": {"type": "string"},
                    "model": {"enum": list(MODEL_NAMES)},
                    "status": {"enum": ["ok", "failed"]},
                    "rmse_mean": {"type": ["number", "null"]},
                    "rmse_std": {"type": ["number", "null"], "minimum": 0},
                    "param_count": {"type": "integer", "minimum": 1},
                    "wall_time_seconds": {"type": "number", "minimum": 0},
                    "error": {"type": "string"},
                },
            },
        },
    },
}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_config(path, schema):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_CONFIG) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}", EXIT_CONFIG) from None
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CliError(f"{path}: {where}: {exc.message}", EXIT_CONFIG) from None
    try:
        train_cfg = TrainConfig.from_dict(cfg.get("train", {}))
    except ConfigError as exc:
        raise CliError(f"{path}: {exc}", EXIT_CONFIG) from None
    return cfg, train_cfg


def _resolve_dataset(ref, registry_path, base_dir):
    if registry_path:
        registry = load_registry(Path(base_dir) / registry_path)
        if ref in registry:
            return registry[ref]
    path = Path(ref)
    return path if path.is_absolute() else Path(base_dir) / path


def _read_dataset(ref, registry_path, base_dir):
    try:
        path = _resolve_dataset(ref, registry_path, base_dir)
    except FileNotFoundError as exc:
        raise CliError(f"registry file not found: {exc.filename}", EXIT_DATA) from None
    except (json.JSONDecodeError, ParseError) as exc:
        raise CliError(f"bad registry {registry_path}: {exc}", EXIT_DATA) from None
    try:
        return load_csv(path, name=ref)
    except FileNotFoundError:
        raise CliError(f"dataset file not found: {path}", EXIT_DATA) from None
    except (ParseError, TooFewRows, ShapeMismatch) as exc:
        raise CliError(str(exc), EXIT_DATA) from None


@dataclass
class RunSpec:
    model: str
    hidden: tuple | None = None
    init_noise_variance: float | None = None
    ecdf: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)


def initial_params(model, d, y, hidden=None, seed=0, init_noise_variance=None):
    spec = feature_spec_for(model, d, hidden=hidden)
    feature = None if spec is None else init_feature(spec, seed)
    base = KernelHyperparams.default(d if spec is None else spec.out_dim, y)
    if init_noise_variance is not None:
        base.log_noise_variance = float(np.log(init_noise_variance))
    return DeepKernelParams(feature, base)


def run_split(run: RunSpec, train: Dataset, test: Dataset):
    """Normalize, fit and evaluate one train/test split.

    Returns ``(FitResult, test_rmse, normalized train set)``.
    """
    if run.ecdf:
        emap = ecdf_fit(train.X)
        train = Dataset(train.name, ecdf_transform(emap, train.X), train.y)
        test = Dataset(test.name, ecdf_transform(emap, test.X), test.y)
    dk = initial_params(run.model, train.d, train.y, run.hidden, run.train.seed,
                        run.init_noise_variance)
    result = fit(dk, run.train, train)
    pred = predict(result.best_params, resolve_mode(run.train, dk, train.n), train, test.X,
                   run.train, variance=False)
    return result, rmse(pred.mean, test.y), train


def _numeric(stage, exc):
    return CliError(f"numeric failure during {stage}: {exc}", EXIT_NUMERIC)


def cmd_train(args):
    cfg, train_cfg = _load_config(args.config, TRAIN_SCHEMA)
    base_dir = Path(args.config).resolve().parent
    data = _read_dataset(cfg["dataset"], cfg.get("registry"), base_dir)
    try:
        plan = partition(data.n, 1, cfg.get("train_fraction", 0.9), cfg.get("seed", train_cfg.seed))
    except TooFewRows as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    train_idx, test_idx = plan.splits[0]
    run = RunSpec(cfg["model"], _widths(cfg.get("hidden")), cfg.get("init_noise_variance"),
                  cfg.get("ecdf", True), train_cfg)
    try:
        result, test_rmse, train = run_split(run, data.subset(train_idx), data.subset(test_idx))
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        raise _numeric("training", exc) from None
    if result.loss_history:
        train_nll = result.best_loss
    else:
        train_nll = gp_nll(result.best_params, train.X, train.y)
    metrics = {
        "train_nll": float(train_nll),
        "test_rmse": test_rmse,
        "epochs_run": result.epochs_run,
        "best_epoch": result.best_epoch,
        "mode": result.mode,
    }
    out = Path(args.out)
    save_checkpoint(out / "checkpoint.json", train_cfg, result, model=cfg["model"])
    atomic_write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics))
    return EXIT_OK


def _widths(w):
    return None if w is None else tuple(w)


def _benchmark_cell(data, model, cfg, train_cfg):
    hidden = _widths(cfg.get("hidden", {}).get(model))
    run = RunSpec(model, hidden, cfg.get("init_noise_variance"), cfg.get("ecdf", True), train_cfg)
    row = {"dataset": data.name, "model": model,
           "param_count": model_param_count(model, data.d, hidden=hidden)}
    start = time.perf_counter()
    try:
        plan = partition(data.n, cfg.get("partitions", 5), cfg.get("train_fraction", 0.9),
                         cfg.get("seed", train_cfg.seed))
        scores = [run_split(run, data.subset(tr), data.subset(te))[1] for tr, te in plan]
        row.update(status="ok", rmse_mean=float(np.mean(scores)), rmse_std=float(np.std(scores)))
    except (DkgpError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.warning("benchmark cell %s/%s failed: %s", data.name, model, exc)
        row.update(status="failed", rmse_mean=None, rmse_std=None, error=str(exc))
    row["wall_time_seconds"] = time.perf_counter() - start
    return row


def format_report(rows):
    """Fixed-width table with ``mean ± std`` cells."""
    header = ("Dataset", "Model", "RMSE", "Params", "Time (s)")
    body = []
    for r in rows:
        cell = "failed" if r["status"] != "ok" else f"{r['rmse_mean']:.2f} ± {r['rmse_std']:.2f}"
        body.append((r["dataset"], r["model"], cell, str(r["param_count"]),
                     f"{r['wall_time_seconds']:.1f}"))
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
    return "\n".join(lines) + "\n"


def worker_count():
    try:
        return max(1, int(os.environ.get("DKGP_THREADS", "1")))
    except ValueError:
        raise CliError("DKGP_THREADS must be a positive integer", EXIT_CONFIG) from None


def cmd_benchmark(args):
    cfg, train_cfg = _load_config(args.config, BENCHMARK_SCHEMA)
    base_dir = Path(args.config).resolve().parent
    datasets = [_read_dataset(ref, cfg.get("registry"), base_dir) for ref in cfg["datasets"]]
    cells = [(data, model) for data in datasets for model in cfg["models"]]
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = list(pool.map(lambda c: _benchmark_cell(c[0], c[1], cfg, train_cfg), cells))
    report = {"rows": rows}
    jsonschema.validate(report, REPORT_SCHEMA)
    out = Path(args.out)
    table = format_report(rows)
    atomic_write_json(out / "report.json", report)
    atomic_write_text(out / "report.txt", table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_param_count(args):
    models = MODEL_NAMES if args.model in (None, "all") else (args.model,)
    if args.dims < 1:
        raise CliError("--dims must be >= 1", EXIT_CONFIG)
    try:
        counts = [(m, model_param_count(m, args.dims)) for m in models]
    except UnknownModel as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    width = max(len(m) for m, _ in counts)
    for m, c in counts:
        print(f"{m.ljust(width)}  {c}")
    return EXIT_OK


STEP_MODELS = {"gp": None, "dkl-mlp": "dkl-mlp", "dkl-kan": "dkl-kan1"}
STEP_HIDDEN = (6,)


def _csv_text(header, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(zip(*[[repr(float(v)) for v in col] for col in columns]))
    return buf.getvalue()


def run_step_demo(seed=0, cfg: TrainConfig | None = None):
    """Fit the three step-function models; returns ``{name: dict of arrays}``."""
    cfg = cfg or TrainConfig(seed=seed)
    train, test = step_data(seed)
    results = {}
    for name, arch in STEP_MODELS.items():
        dk = initial_params(arch or "gp", 1, train.y, STEP_HIDDEN if arch else None, seed)
        result = fit(dk, cfg, train)
        pred = predict(result.best_params, "exact", train, test.X, cfg)
        results[name] = {
            "x": test.X[:, 0], "mean": pred.mean, "std": pred.std,
            "latent": None if arch is None else result.best_params.latent(test.X),
            "fit": result, "y": test.y,
        }
    return results


def cmd_step_demo(args):
    cfg = TrainConfig(seed=args.seed, epochs=args.epochs, patience=min(1000, args.epochs))
    try:
        results = run_step_demo(args.seed, cfg)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        raise _numeric("step-demo training", exc) from None
    out = Path(args.out)
    for name, r in results.items():
        atomic_write_text(out / name / "predictions.csv",
                          _csv_text(("x", "mean", "std"), (r["x"], r["mean"], r["std"])))
        if r["latent"] is not None:
            Z = r["latent"]
            atomic_write_text(out / name / "latent.csv",
                              _csv_text(("x", "z1", "z2"), (r["x"], Z[:, 0], Z[:, 1])))
        print(f"{name}: test RMSE {rmse(r['mean'], r['y']):.4f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="dkgp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit one model on one dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="repeated train/test splits over datasets and models")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("param-count", help="trainable parameter totals")
    p.add_argument("--model", default="all")
    p.add_argument("--dims", type=int, required=True)
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("step-demo", help="step-function experiment, writes plot-data CSVs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=2500)
    p.set_defaults(func=cmd_step_demo)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"dkgp: error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"dkgp: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
