"""JSON run configuration, validation and single-run execution.

A config is a nested JSON object; every field has a default, so ``{}``
is a valid config using the long 300-epoch schedule. Example::

    {
      "objective": {"kind": "mlp", "hidden": 16, "activation": "relu"},
      "dataset": {"kind": "blobs", "n_samples": 600, "dim": 2, "num_classes": 3,
                  "spread": 0.5, "seed": 0},
      "quant": {"solver": "ternary_exact"},
      "optimizer": "binaryrelax",
      "lr": {"gamma0": 0.1, "decay_epochs": [120, 220], "decay_factor": 0.1, "kind": "step"},
      "relax": {"lambda0": 1.0, "rho": 1.02, "cadence": 1.0, "phase2_epoch": 240},
      "epochs": 300, "batch_size": 128, "momentum": 0.95, "weight_decay": 0.0001,
      "seed": 0
    }

``objective.kind`` is one of ``mlp``, ``logistic``, ``quadratic`` (the
latter takes ``c``, optional ``diag`` and ``x0`` and ignores the
dataset). ``dataset.kind`` is ``blobs`` or ``csv`` (with ``path``).
Unknown keys are rejected.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .objectives import (Dataset, DatasetError, GradientOracle, MlpLayout, gen_blobs,
                         load_checkpoint, load_csv, make_logistic, make_mlp, make_quadratic,
                         stratified_split)
from .optimizers import (LearningRateSchedule, Optimizer, TrainConfig, TrainingError,
                         TrainingResult, run_training)
from .quantizer import QuantScheme, SchemeError, Solver, BINARY_LEVELS, TERNARY_LEVELS
from .relaxation import RelaxationSchedule

METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = ("epoch", "iter", "phase", "lambda", "gamma", "train_loss", "val_loss",
                   "val_acc", "dist_to_q", "alpha_mean", "alpha_min", "alpha_undef_count",
                   "stationarity_proxy")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


@dataclass
class ObjectiveSpec:
    kind: str = "mlp"
    hidden: int = 16
    activation: str = "relu"
    c: list[float] | None = None
    diag: list[float] | None = None
    x0: list[float] | None = None


@dataclass
class DatasetSpec:
    kind: str = "blobs"
    n_samples: int = 600
    dim: int = 2
    num_classes: int = 3
    spread: float = 0.5
    seed: int = 0
    path: str | None = None


@dataclass
class QuantSpec:
    solver: str = "ternary_exact"
    levels: list[float] | None = None
    max_iters: int = 1

    def scheme(self) -> QuantScheme:
        solver = Solver(self.solver)
        levels = self.levels
        if levels is None:
            levels = BINARY_LEVELS if solver is Solver.BINARY_EXACT else TERNARY_LEVELS
        return QuantScheme(tuple(levels), solver, self.max_iters)


@dataclass
class RunConfig:
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    quant: QuantSpec = field(default_factory=QuantSpec)
    optimizer: str = "binaryrelax"
    lr: LearningRateSchedule = field(default_factory=LearningRateSchedule)
    relax: RelaxationSchedule = field(default_factory=RelaxationSchedule)
    epochs: int = 300
    batch_size: int = 128
    momentum: float = 0.95
    weight_decay: float = 1e-4
    seed: int = 0
    init_checkpoint: str | None = None
    out: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["lr"]["decay_epochs"] = list(d["lr"]["decay_epochs"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        errors: list[str] = []
        cfg = _build(cls, data, "", errors)
        if errors:
            raise ConfigError(errors)
        return cfg

    def train_config(self) -> TrainConfig:
        opt = Optimizer(self.optimizer)
        return TrainConfig(
            optimizer=opt,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            relax=self.relax if opt is Optimizer.BINARYRELAX else None,
            scheme=None if opt is Optimizer.FLOAT else self.quant.scheme(),
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )

    def validate(self) -> list[str]:
        """Raise ``ConfigError`` listing every problem; return warnings."""
        errors, warnings = [], []
        try:
            opt = Optimizer(self.optimizer)
        except ValueError:
            errors.append(f"optimizer must be one of {[o.value for o in Optimizer]}, "
                          f"got {self.optimizer!r}")
            opt = None
        if self.objective.kind not in ("mlp", "logistic", "quadratic"):
            errors.append(f"objective.kind must be mlp, logistic or quadratic, "
                          f"got {self.objective.kind!r}")
        if self.objective.kind == "quadratic" and not self.objective.c:
            errors.append("objective.c is required for the quadratic objective")
        if self.objective.kind == "mlp":
            if self.objective.hidden < 1:
                errors.append("objective.hidden must be >= 1")
            if self.objective.activation not in ("relu", "tanh"):
                errors.append("objective.activation must be relu or tanh")
        if self.objective.kind != "quadratic":
            if self.dataset.kind not in ("blobs", "csv"):
                errors.append(f"dataset.kind must be blobs or csv, got {self.dataset.kind!r}")
            if self.dataset.kind == "csv" and not self.dataset.path:
                errors.append("dataset.path is required for csv datasets")
            if self.dataset.kind == "blobs":
                if self.dataset.spread <= 0:
                    errors.append("dataset.spread must be > 0")
                if self.dataset.n_samples < self.dataset.num_classes:
                    errors.append("dataset.n_samples must be >= dataset.num_classes")
        try:
            scheme = self.quant.scheme()
        except (SchemeError, ValueError) as exc:
            errors.append(f"quant: {exc}")
            scheme = None
        if opt is not None:
            tc = TrainConfig(opt, self.epochs, self.batch_size, self.lr,
                             self.relax if opt is Optimizer.BINARYRELAX else None,
                             None if opt is Optimizer.FLOAT else scheme,
                             self.momentum, self.weight_decay, self.seed)
            errors.extend(e for e in tc.errors() if not e.endswith("quantization scheme"))
            if opt is Optimizer.FLOAT:
                warnings.append("optimizer float ignores the quantization scheme")
            if opt is Optimizer.BINARYRELAX and not self.relax.errors():
                w = self.relax.window_warning()
                if w:
                    warnings.append(w)
                if self.relax.phase2_epoch > self.epochs:
                    warnings.append("relax.phase2_epoch exceeds epochs; phase II never starts")
        if self.seed < 0 or self.seed >= 2**64:
            errors.append("seed must be an unsigned 64-bit integer")
        if errors:
            raise ConfigError(errors)
        return warnings


def _build(cls, data, prefix: str, errors: list[str]):
    if not isinstance(data, dict):
        errors.append(f"{prefix or 'config'} must be an object")
        return cls()
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            errors.append(f"unknown config key {prefix}{key}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        nested = _NESTED.get((cls, name))
        if nested is not None:
            kwargs[name] = _build(nested, value, f"{prefix}{name}.", errors)
            continue
        kwargs[name] = value
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{prefix or 'config'}: {exc}")
        return cls()
    for name, value in kwargs.items():
        want = _TYPES.get((cls, name))
        if want is not None and value is not None and not _type_ok(value, want):
            errors.append(f"{prefix}{name} must be {want}, got {value!r}")
    return obj


_NESTED = {
    (RunConfig, "objective"): ObjectiveSpec,
    (RunConfig, "dataset"): DatasetSpec,
    (RunConfig, "quant"): QuantSpec,
    (RunConfig, "lr"): LearningRateSchedule,
    (RunConfig, "relax"): RelaxationSchedule,
}

_TYPES = {
    (RunConfig, "epochs"): "int", (RunConfig, "batch_size"): "int", (RunConfig, "seed"): "int",
    (RunConfig, "momentum"): "number", (RunConfig, "weight_decay"): "number",
    (RunConfig, "optimizer"): "string",
    (ObjectiveSpec, "hidden"): "int", (ObjectiveSpec, "kind"): "string",
    (DatasetSpec, "n_samples"): "int", (DatasetSpec, "dim"): "int",
    (DatasetSpec, "num_classes"): "int", (DatasetSpec, "seed"): "int",
    (DatasetSpec, "spread"): "number", (DatasetSpec, "kind"): "string",
    (QuantSpec, "max_iters"): "int", (QuantSpec, "solver"): "string",
    (LearningRateSchedule, "gamma0"): "number", (LearningRateSchedule, "decay_factor"): "number",
    (RelaxationSchedule, "lambda0"): "number", (RelaxationSchedule, "rho"): "number",
    (RelaxationSchedule, "cadence"): "number", (RelaxationSchedule, "phase2_epoch"): "int",
}


def _type_ok(value, want: str) -> bool:
    if want == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if want == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, str)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"{path}: no such file"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON: {exc}"]) from None
    return RunConfig.from_dict(data)


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError([f"override {text!r} must look like KEY=VALUE"])
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``dotted.key=value`` overrides; values are parsed as JSON when possible."""
    data = copy.deepcopy(cfg.to_dict())
    errors = []
    for text in overrides:
        key, value = parse_override(text)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                errors.append(f"override {key!r}: {part!r} is not a config section")
                break
            node = node[part]
        else:
            if parts[-1] not in node:
                errors.append(f"override {key!r}: unknown key")
            else:
                node[parts[-1]] = value
    if errors:
        raise ConfigError(errors)
    return RunConfig.from_dict(data)


@dataclass
class PreparedRun:
    train: TrainConfig
    oracle: GradientOracle
    val: Dataset | None
    init: np.ndarray | None


def prepare(cfg: RunConfig) -> PreparedRun:
    obj = cfg.objective
    val = None
    if obj.kind == "quadratic":
        oracle = make_quadratic(obj.c, obj.diag)
        init = None if obj.x0 is None else np.asarray(obj.x0, dtype=np.float64)
    else:
        ds = cfg.dataset
        if ds.kind == "blobs":
            train, val = gen_blobs(ds.n_samples, ds.dim, ds.num_classes, ds.spread, ds.seed)
        else:
            train, val = stratified_split(load_csv(ds.path), np.random.default_rng(ds.seed))
        if obj.kind == "logistic":
            oracle = make_logistic(train)
        else:
            layout = MlpLayout(train.dim, obj.hidden, train.num_classes, obj.activation)
            oracle = make_mlp(layout, train, seed=cfg.seed)
        init = None
    if cfg.init_checkpoint:
        init = load_checkpoint(cfg.init_checkpoint)
        if init.size != oracle.n:
            raise ConfigError([f"checkpoint has {init.size} values, model needs {oracle.n}"])
    if init is not None and init.size != oracle.n:
        raise ConfigError([f"objective.x0 has {init.size} values, model needs {oracle.n}"])
    return PreparedRun(cfg.train_config(), oracle, val, init)


def format_value(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def write_metrics(records, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow([format_value(v) for v in (
                r.epoch, r.iter, r.phase, r.lam, r.gamma, r.train_loss, r.val_loss, r.val_acc,
                r.dist_to_q, r.alpha_mean, r.alpha_min, r.alpha_undef_count,
                r.stationarity_proxy)])


def _json_float(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else str(v)


def execute(cfg: RunConfig, out_dir, overrides: list[str] | None = None) -> dict[str, Any]:
    """Run one config, writing ``metrics.csv`` and ``summary.json`` under ``out_dir``.

    Returns the summary. A ``TrainingError`` still writes the partial CSV
    and a summary with ``status: failed``, then re-raises.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    warnings = cfg.validate()
    run = prepare(cfg)
    start = time.perf_counter()
    summary: dict[str, Any] = {
        "status": "ok",
        "metrics_schema": METRICS_SCHEMA_VERSION,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "overrides": list(overrides or []),
        "warnings": warnings,
    }
    try:
        result: TrainingResult = run_training(run.train, run.oracle, run.val, init=run.init)
    except TrainingError as exc:
        write_metrics(exc.records, out_dir / "metrics.csv")
        summary.update(status="failed", error=str(exc), failed_iteration=exc.iteration,
                       wall_time=time.perf_counter() - start)
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
        raise
    write_metrics(result.records, out_dir / "metrics.csv")
    final = result.final
    summary.update(
        final_train_loss=_json_float(final.train_loss),
        final_val_loss=_json_float(final.val_loss),
        final_val_acc=_json_float(final.val_acc),
        final_dist_to_q=_json_float(final.dist_to_q),
        alpha_min=_json_float(result.alpha_min),
        alpha_max=_json_float(result.alpha_max),
        alpha_undefined=result.alpha_undefined,
        sigma2=_json_float(result.sigma2),
        lambda_at_switch=_json_float(result.switch_lambda),
        wall_time=time.perf_counter() - start,
    )
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def run_quiet(cfg: RunConfig) -> TrainingResult:
    """Train without touching the filesystem (used by comparisons and tests)."""
    cfg.validate()
    run = prepare(cfg)
    return run_training(run.train, run.oracle, run.val, init=run.init)


__all__ = [
    "ConfigError", "DatasetError", "DatasetSpec", "METRICS_COLUMNS", "ObjectiveSpec",
    "QuantSpec", "RunConfig", "apply_overrides", "execute", "load_config", "prepare",
    "run_quiet", "write_metrics",
]
