"""Command-line entry point: train, certify, heatmap, tune-alpha, sweep-eps.

Everything that affects results lives in a TOML run config; flags only name
paths, verbosity and the BLAS thread count. Exit codes: 0 ok, 2 config
error, 3 data error, 4 numerical divergence. Errors are printed to stderr as
one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import model as model_io
from .certify import PairGrid, certify_dataset, grid_from_margins, margin_matrix, write_records_jsonl
from .cost import TASK_KINDS, CostMatrix, make_task, parse_cost_matrix
from .data import (DataFormatError, Dataset, FoldSplit, load_cifar10, load_csv_dataset,
                   load_mnist_idx, split_folds, stratified_subsample, synth_blobs)
from .model import ModelFileError, init_params
from .numcore import NumericalError, Rng
from .train import (TrainConfig, TrainingDivergedError, evaluate, train, tune_alpha)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("csrobust")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

SECTION_KEYS = {
    "": {"output_dir", "data", "model", "train", "task", "eval"},
    "data": {"source", "images", "labels", "test_images", "test_labels", "paths", "test_paths",
             "path", "test_path", "n_classes", "n_train", "n_test", "subsample_seed", "folds",
             "validation_fold", "blobs"},
    "data.blobs": {"m", "d", "per_class", "test_per_class", "spread", "seed"},
    "model": {"hidden"},
    "train": set(TrainConfig.field_names()),
    "task": {"kind", "cost_matrix", "s", "t", "pairs", "seeds", "n", "seed", "grid", "sources",
             "targets", "group", "inside", "outside"},
    "eval": {"epsilon", "epsilons", "split"},
}
SPLITS = ("test", "validation", "train", "all")


class ConfigError(ValueError):
    def __init__(self, fieldname, message):
        super().__init__(message)
        self.field = fieldname


@dataclass
class RunConfig:
    raw: dict
    data: dict
    hidden: list
    train: TrainConfig
    task: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    output_dir: str | None = None


def _check_keys(section: dict, name: str):
    allowed = SECTION_KEYS[name]
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}" if name else key, "unknown key")


def _need_file(data, key, prefix="data"):
    path = data.get(key)
    if path is None:
        raise ConfigError(f"{prefix}.{key}", "missing required path")
    if not Path(path).is_file():
        raise ConfigError(f"{prefix}.{key}", f"file not found: {path}")


def parse_config(raw: dict, base: Path | None = None) -> RunConfig:
    """Validate a decoded TOML document; relative paths resolve against ``base``."""
    _check_keys(raw, "")
    data = dict(raw.get("data", {}))
    _check_keys(data, "data")
    if base is not None:
        for key in ("images", "labels", "test_images", "test_labels", "path", "test_path"):
            if key in data:
                data[key] = str(base / data[key])
        for key in ("paths", "test_paths"):
            if key in data:
                data[key] = [str(base / p) for p in data[key]]
    source = data.get("source")
    if source == "mnist":
        _need_file(data, "images")
        _need_file(data, "labels")
        if ("test_images" in data) != ("test_labels" in data):
            raise ConfigError("data.test_labels", "test images and labels come together")
        for key in ("test_images", "test_labels"):
            if key in data:
                _need_file(data, key)
    elif source == "cifar10":
        if not data.get("paths"):
            raise ConfigError("data.paths", "missing required path list")
        for p in list(data["paths"]) + list(data.get("test_paths", [])):
            if not Path(p).is_file():
                raise ConfigError("data.paths", f"file not found: {p}")
    elif source == "csv":
        _need_file(data, "path")
        if "test_path" in data:
            _need_file(data, "test_path")
    elif source == "blobs":
        blobs = data.get("blobs")
        if not isinstance(blobs, dict):
            raise ConfigError("data.blobs", "missing blob settings")
        _check_keys(blobs, "data.blobs")
        for key in ("m", "d", "per_class", "spread"):
            if key not in blobs:
                raise ConfigError(f"data.blobs.{key}", "missing required value")
    else:
        raise ConfigError("data.source", f"expected mnist, cifar10, csv or blobs, got {source!r}")
    folds = data.get("folds", 5)
    if not isinstance(folds, int) or folds < 2:
        raise ConfigError("data.folds", "need an integer >= 2")
    if not 0 <= data.get("validation_fold", 0) < folds:
        raise ConfigError("data.validation_fold", "out of range")

    mdl = raw.get("model", {})
    _check_keys(mdl, "model")
    hidden = mdl.get("hidden", [100, 100])
    if not isinstance(hidden, list) or not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError("model.hidden", "expected a list of positive integers")

    tr = raw.get("train", {})
    _check_keys(tr, "train")
    try:
        tcfg = TrainConfig(**tr)
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from exc

    task = dict(raw.get("task", {}))
    _check_keys(task, "task")
    if "kind" in task and "cost_matrix" in task:
        raise ConfigError("task.cost_matrix", "give either a task kind or a cost matrix file")
    if "cost_matrix" in task:
        if base is not None:
            task["cost_matrix"] = str(base / task["cost_matrix"])
        _need_file(task, "cost_matrix", "task")
    elif "kind" in task and task["kind"] not in TASK_KINDS:
        raise ConfigError("task.kind", f"expected one of {TASK_KINDS}")
    if task.get("kind") == "top-pairs":
        if base is not None and "grid" in task:
            task["grid"] = str(base / task["grid"])
        _need_file(task, "grid", "task")
    if tcfg.loss in ("cs_robust", "standard_cs") and not task:
        raise ConfigError("task", f"loss {tcfg.loss!r} needs a task or cost matrix")

    ev = raw.get("eval", {})
    _check_keys(ev, "eval")
    if ev.get("split", "test") not in SPLITS:
        raise ConfigError("eval.split", f"expected one of {SPLITS}")
    for e in [ev.get("epsilon", 0.0)] + list(ev.get("epsilons", [])):
        if not isinstance(e, (int, float)) or e < 0:
            raise ConfigError("eval.epsilon", "epsilon values must be nonnegative numbers")
    out = raw.get("output_dir")
    if out is not None and base is not None:
        out = str(base / out)
    return RunConfig(raw, data, hidden, tcfg, task, dict(ev), out)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"not valid TOML: {exc}") from exc
    return parse_config(raw, path.parent)


# -- data and task assembly ------------------------------------------------


@dataclass
class RunData:
    pool: Dataset  # training pool, split into train/validation folds
    folds: FoldSplit
    test: Dataset | None

    @property
    def train_set(self):
        idx = self.folds.train_indices()
        return self.pool.X[idx], self.pool.y[idx]

    @property
    def val_set(self):
        idx = self.folds.val_indices()
        return self.pool.X[idx], self.pool.y[idx]

    def split(self, name):
        if name == "train":
            return self.train_set
        if name == "validation":
            return self.val_set
        if name == "all":
            return self.pool.X, self.pool.y
        if self.test is None:
            raise ConfigError("eval.split", "no test data configured")
        return self.test.X, self.test.y


def load_run_data(cfg: RunConfig) -> RunData:
    d = cfg.data
    seed = d.get("subsample_seed", 0)
    test = None
    if d["source"] == "mnist":
        pool = load_mnist_idx(d["images"], d["labels"])
        if "test_images" in d:
            test = load_mnist_idx(d["test_images"], d["test_labels"])
    elif d["source"] == "cifar10":
        pool = load_cifar10(d["paths"])
        if d.get("test_paths"):
            test = load_cifar10(d["test_paths"])
    elif d["source"] == "csv":
        pool = load_csv_dataset(d["path"], d.get("n_classes"))
        if "test_path" in d:
            test = load_csv_dataset(d["test_path"], pool.n_classes)
    else:
        b = d["blobs"]
        rng = Rng(b.get("seed", 0))
        pool = synth_blobs(rng.child("train"), b["m"], b["d"], b["per_class"], b["spread"])
        if b.get("test_per_class"):
            test = synth_blobs(rng.child("test"), b["m"], b["d"], b["test_per_class"], b["spread"])
    n_train, n_test = d.get("n_train"), d.get("n_test")
    if test is None and n_test:
        # carve a disjoint stratified test set out of the same pool
        te = stratified_subsample(pool, n_test, Rng(seed).child("test"))
        rest = np.setdiff1d(np.arange(len(pool)), te)
        test = pool.subset(te)
        pool = pool.subset(rest)
    elif test is not None and n_test:
        test = test.subset(stratified_subsample(test, n_test, Rng(seed).child("test")))
    if n_train:
        pool = pool.subset(stratified_subsample(pool, n_train, Rng(seed).child("train")))
    folds = split_folds(pool, d.get("folds", 5), Rng(seed).child("folds"), d.get("validation_fold", 0))
    return RunData(pool, folds, test)


def build_cost(cfg: RunConfig, m: int) -> CostMatrix | None:
    t = cfg.task
    if not t:
        return None
    if "cost_matrix" in t:
        C = parse_cost_matrix(t["cost_matrix"])
        if C.m != m:
            raise ConfigError("task.cost_matrix", f"cost matrix is {C.m}x{C.m}, data has {m} classes")
        return C
    params = {k: v for k, v in t.items() if k not in ("kind", "seed", "grid")}
    if t["kind"] == "random-pairs":
        params["rng"] = Rng(t.get("seed", 0)).child("task")
    if t["kind"] == "top-pairs":
        params["grid"] = PairGrid.from_csv(t["grid"]).matrix
    try:
        return make_task(t["kind"], m, **params)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("task", f"{type(exc).__name__}: {exc}") from exc


# -- schemas for the JSON artifacts ----------------------------------------

_NUM_OR_NULL = {"type": ["number", "null"]}
METRICS_PROPERTIES = {
    "n": {"type": "integer", "minimum": 0},
    "epsilon": {"type": "number", "minimum": 0},
    "classification_error": {"type": "number", "minimum": 0, "maximum": 1},
    "overall_robust_error": {"type": "number", "minimum": 0, "maximum": 1},
    "cs_robust_error": _NUM_OR_NULL,
    "robust_cost": _NUM_OR_NULL,
    "misclassification_cost": _NUM_OR_NULL,
}
METRICS_SCHEMA = {
    "type": "object",
    "required": list(METRICS_PROPERTIES),
    "properties": METRICS_PROPERTIES,
}
SCHEMAS = {
    "summary": {
        "type": "object",
        "required": ["selected_epoch", "flagged", "seed", "metric_name", "validation", "test", "config"],
        "properties": {
            "selected_epoch": {"type": "integer", "minimum": 0},
            "flagged": {"type": "boolean"},
            "seed": {"type": "integer"},
            "metric_name": {"enum": ["overall_robust_error", "cs_robust_error"]},
            "validation": METRICS_SCHEMA,
            "test": {"oneOf": [METRICS_SCHEMA, {"type": "null"}]},
            "config": {"type": "object"},
        },
    },
    "metrics": {
        "type": "object",
        "required": list(METRICS_PROPERTIES) + ["warnings"],
        "properties": {**METRICS_PROPERTIES, "warnings": {"type": "array", "items": {"type": "string"}}},
    },
    "record": {
        "type": "object",
        "required": ["id", "label", "bounds", "certified"],
        "properties": {
            "id": {"type": "integer"},
            "label": {"type": "integer", "minimum": 0},
            "bounds": {"type": "object", "additionalProperties": {"type": "number"}},
            "certified": {"type": "boolean"},
        },
    },
    "tuning": {
        "type": "object",
        "required": ["coarse", "fine", "coarse_grid", "fine_grid", "alpha_coarse", "best_alpha", "flagged"],
        "properties": {
            "coarse": {"type": "array", "minItems": 5, "maxItems": 5},
            "fine": {"type": "array", "minItems": 7, "maxItems": 7},
            "coarse_grid": {"type": "array", "items": {"type": "number"}},
            "fine_grid": {"type": "array", "items": {"type": "number"}},
            "alpha_coarse": {"type": "number"},
            "best_alpha": {"type": "number"},
            "flagged": {"type": "boolean"},
        },
    },
    "error": {
        "type": "object",
        "required": ["error", "message"],
        "properties": {
            "error": {"enum": ["config", "data", "diverged"]},
            "field": {"type": "string"},
            "message": {"type": "string"},
        },
    },
}
HISTORY_HEADER = ["epoch", "epsilon", "lr", "train_loss", "val_class_err", "val_robust_metric"]
SWEEP_HEADER = ["model", "epsilon", "classification_error", "overall_robust_error",
                "cs_robust_error", "robust_cost"]


# -- commands ----------------------------------------------------------------


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _output_dir(cfg: RunConfig, override):
    out = override or cfg.output_dir
    if out is None:
        raise ConfigError("output_dir", "no output directory given")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path, flag="--model"):
    if not Path(path).is_file():
        raise ConfigError(flag, f"file not found: {path}")
    return model_io.load(path)


def _check_model_fits(net, data: RunData):
    if net.input_dim != data.pool.dim or net.n_classes != data.pool.n_classes:
        raise DataFormatError(f"model expects {net.input_dim} features and {net.n_classes} classes, "
                              f"data has {data.pool.dim} and {data.pool.n_classes}")


def cmd_train(cfg: RunConfig, output_dir=None) -> dict:
    out = _output_dir(cfg, output_dir)
    data = load_run_data(cfg)
    C = build_cost(cfg, data.pool.n_classes)
    sizes = [data.pool.dim, *cfg.hidden, data.pool.n_classes]
    net = init_params(sizes, Rng(cfg.train.seed).child("init"))
    result = train(net, data.train_set, data.val_set, cfg.train, C)
    model_io.save(result.network, out / "model.csrb")
    result.history.to_csv(out / "history.csv")
    eps, clip = cfg.train.epsilon, cfg.train.clip
    summary = {
        "selected_epoch": result.selected_epoch,
        "flagged": result.flagged,
        "seed": cfg.train.seed,
        "metric_name": result.history.metric_name,
        "validation": evaluate(result.network, *data.val_set, eps, C, clip),
        "test": None if data.test is None else evaluate(result.network, data.test.X, data.test.y, eps, C, clip),
        "config": cfg.raw,
    }
    _write_json(out / "summary.json", summary)
    return summary


def _eval_split(cfg: RunConfig, data: RunData):
    return data.split(cfg.eval.get("split", "test"))


def cmd_certify(cfg: RunConfig, model_path, output_dir=None) -> dict:
    out = _output_dir(cfg, output_dir)
    net = _load_model(model_path)
    data = load_run_data(cfg)
    _check_model_fits(net, data)
    C = build_cost(cfg, net.n_classes)
    X, y = _eval_split(cfg, data)
    eps = cfg.eval.get("epsilon", cfg.train.epsilon)
    records = certify_dataset(net, X, y, eps, cfg.train.clip)
    write_records_jsonl(records, out / "records.jsonl")
    metrics = evaluate(net, X, y, eps, C, cfg.train.clip)
    warnings = []
    if C is None:
        warnings.append("no cost matrix configured; cost-sensitive metrics are null")
    elif metrics["cs_robust_error"] is None:
        warnings.append("no candidate seed examples; cost-sensitive robust metrics are undefined")
    for w in warnings:
        log.warning(w)
    metrics["warnings"] = warnings
    _write_json(out / "metrics.json", metrics)
    return metrics


def cmd_heatmap(cfg: RunConfig, model_path, out_path) -> np.ndarray:
    net = _load_model(model_path)
    data = load_run_data(cfg)
    _check_model_fits(net, data)
    X, y = _eval_split(cfg, data)
    eps = cfg.eval.get("epsilon", cfg.train.epsilon)
    grid = grid_from_margins(margin_matrix(net, X, y, eps, cfg.train.clip), y, net.n_classes)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    grid.to_csv(out_path)
    return grid.matrix


def cmd_tune_alpha(cfg: RunConfig, output_dir=None) -> dict:
    out = _output_dir(cfg, output_dir)
    if cfg.train.loss != "cs_robust":
        raise ConfigError("train.loss", "tune-alpha needs loss = 'cs_robust'")
    data = load_run_data(cfg)
    C = build_cost(cfg, data.pool.n_classes)
    sizes = [data.pool.dim, *cfg.hidden, data.pool.n_classes]
    Xv, yv = data.val_set

    def train_fn(alpha):
        tc = TrainConfig(**{**asdict(cfg.train), "alpha": alpha})
        net = init_params(sizes, Rng(tc.seed).child("init"))
        return train(net, data.train_set, data.val_set, tc, C).network

    def evaluate_fn(net):
        m = evaluate(net, Xv, yv, cfg.train.epsilon, C, cfg.train.clip)
        if m["cs_robust_error"] is None:
            raise ValueError("validation split has no candidate seed examples")
        return m["classification_error"], m["cs_robust_error"]

    report = tune_alpha(train_fn, evaluate_fn, cfg.train.selection_threshold).to_dict()
    _write_json(out / "tuning.json", report)
    return report


def cmd_sweep_eps(cfg: RunConfig, baseline_path, cs_path, out_path) -> list:
    nets = {"baseline": _load_model(baseline_path, "--baseline"), "cost_sensitive": _load_model(cs_path, "--cs")}
    data = load_run_data(cfg)
    for net in nets.values():
        _check_model_fits(net, data)
    C = build_cost(cfg, data.pool.n_classes)
    if C is None:
        raise ConfigError("task", "sweep-eps needs a task or cost matrix")
    eps_list = cfg.eval.get("epsilons")
    if not eps_list:
        raise ConfigError("eval.epsilons", "missing epsilon list")
    X, y = _eval_split(cfg, data)
    rows = []
    for name, net in nets.items():
        for eps in eps_list:
            m = evaluate(net, X, y, eps, C, cfg.train.clip)
            rows.append([name, eps, m["classification_error"], m["overall_robust_error"],
                         m["cs_robust_error"], m["robust_cost"]])
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in r])
    return rows


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csrobust", description="Cost-sensitive certified robust training.")
    ap.add_argument("--threads", type=int, default=1, help="BLAS threads (results are reproducible at 1)")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")

    p = sub.add_parser("certify", help="per-example certificates and metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output-dir")

    p = sub.add_parser("heatmap", help="pairwise robust error grid as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("tune-alpha", help="two-stage grid search for alpha (12 trainings)")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--accept-budget", action="store_true", help="confirm running 12 trainings")

    p = sub.add_parser("sweep-eps", help="compare two models across epsilon values")
    p.add_argument("--config", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--cs", required=True)
    p.add_argument("--out", required=True)
    return ap


def _fail(kind, message, fieldname=None, code=EXIT_CONFIG):
    err = {"error": kind, "message": message}
    if fieldname is not None:
        err["field"] = fieldname
    print(json.dumps(err), file=sys.stderr)
    return code


def _dispatch(args):
    cfg = load_config(args.config)
    if args.command == "train":
        cmd_train(cfg, args.output_dir)
    elif args.command == "certify":
        cmd_certify(cfg, args.model, args.output_dir)
    elif args.command == "heatmap":
        cmd_heatmap(cfg, args.model, args.out)
    elif args.command == "tune-alpha":
        if not args.accept_budget:
            raise ConfigError("--accept-budget", "tune-alpha runs 12 trainings; pass --accept-budget")
        cmd_tune_alpha(cfg, args.output_dir)
    else:
        cmd_sweep_eps(cfg, args.baseline, args.cs, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            _dispatch(args)
    except ConfigError as exc:
        return _fail("config", str(exc), exc.field, EXIT_CONFIG)
    except (TrainingDivergedError, NumericalError) as exc:
        return _fail("diverged", str(exc), None, EXIT_DIVERGED)
    except (DataFormatError, ModelFileError, OSError, ValueError) as exc:
        # ValueError covers data-dependent failures such as too few examples per class
        return _fail("data", str(exc), None, EXIT_DATA)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
