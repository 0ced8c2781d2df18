"""Seeded experiment runner: method x hyperparameter x trial sweeps.

A cell (method, hyperparameter, trial) is fully determined by the config and
``base_seed + trial``. Data, the train/val split, parameter init and the
mini-batch order each draw from their own PCG64 stream of that seed (see
``data.derive_rng``), so every method in a trial sees the same data, the same
initial parameters and the same batches.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import STREAM_BATCHES, STREAM_INIT, DataConfig, derive_rng, generate_dataset
from .errors import CocelabError, ConfigError
from .evaluation import EvalReport, evaluate
from .models import ModelSpec
from .objectives import ObjectiveConfig
from .optimizers import (
    Schedule,
    SharpDROConfig,
    TrainState,
    coce_sgd_step,
    objective_step,
    sam_step,
    sharpdro_step,
)
from .transforms import PhiTransform, RhoFunction, ThetaStrategy

log = logging.getLogger(__name__)

DEFAULT_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)
METHOD_NAMES = ("erm", "coce", "softad", "sam", "sharpdro", "flooding", "tilted-erm")
SPLITS = ("train", "val", "test")
SUMMARY_METRICS = ("balanced_accuracy", "average_accuracy", "average_loss", "param_l2")

# keys accepted per method, beyond "name", "label" and "grid"
_METHOD_KEYS = {
    "erm": set(),
    "coce": {"phi", "rho", "theta"},
    "softad": {"rho"},
    "sam": set(),
    "sharpdro": {"prob_step"},
    "flooding": set(),
    "tilted-erm": set(),
}


def _reject_unknown(section, given, allowed):
    extra = set(given) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(extra))}")


@dataclass(frozen=True)
class MethodSpec:
    name: str
    label: str
    grid: tuple | None = None
    phi: PhiTransform | None = None
    rho: RhoFunction | None = None
    theta: ThetaStrategy | None = None
    prob_step: float = 0.01

    @property
    def has_hyper(self) -> bool:
        return self.name != "erm"

    def objective(self, hyper) -> ObjectiveConfig:
        if self.name in ("erm", "sam", "sharpdro"):
            return ObjectiveConfig.erm()
        if self.name == "coce":
            return ObjectiveConfig.coce(self.phi, self.rho, hyper, self.theta)
        if self.name == "softad":
            return ObjectiveConfig.softad(hyper, self.rho)
        if self.name == "flooding":
            return ObjectiveConfig.flooding(hyper)
        return ObjectiveConfig.tilted_erm(hyper)

    def to_dict(self):
        d = {"name": self.name, "label": self.label}
        if self.grid is not None:
            d["grid"] = list(self.grid)
        if self.name == "coce":
            d["phi"] = {k: v for k, v in dataclasses.asdict(self.phi).items() if v is not None}
            d["theta"] = dataclasses.asdict(self.theta)
        if self.name in ("coce", "softad"):
            d["rho"] = self.rho.kind
        if self.name == "sharpdro":
            d["prob_step"] = self.prob_step
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        name = d.get("name")
        if name not in METHOD_NAMES:
            raise ConfigError(f"unknown method {name!r}; expected one of {METHOD_NAMES}")
        _reject_unknown(f"method {name}", d, {"name", "label", "grid"} | _METHOD_KEYS[name])
        grid = d.get("grid")
        kw = {"name": name, "label": d.get("label", name), "grid": None if grid is None else tuple(map(float, grid))}
        try:
            if name == "coce":
                phi = d.get("phi", {"kind": "raw-exp", "gamma": 0.1})
                _reject_unknown("phi", phi, {"kind", "beta", "gamma"})
                kw["phi"] = PhiTransform(**phi)
                theta = d.get("theta", {"kind": "fixed", "theta": 0.0})
                _reject_unknown("theta", theta, {"kind", "theta", "lr_scale"})
                kw["theta"] = ThetaStrategy(**theta)
            if name in ("coce", "softad"):
                kw["rho"] = RhoFunction(d.get("rho", "pseudo-huber"))
            if name == "sharpdro":
                kw["prob_step"] = float(d.get("prob_step", 0.01))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        spec = cls(**kw)
        if name == "coce":
            spec.objective(0.0)  # validates the phi/theta combination
        return spec


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    architecture: str = "linear"
    hidden_dim: int | None = None
    methods: tuple = ()
    hyper_grid: tuple = DEFAULT_GRID
    epochs: int = 200
    batch_size: int = 100
    trials: int = 10
    base_seed: int = 0
    eval_epochs: tuple = (50, 150)
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("no methods configured")
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ConfigError("method labels must be unique")
        if self.epochs < 1 or self.batch_size < 1 or self.trials < 1:
            raise ConfigError("epochs, batch_size and trials must be positive")
        if self.base_seed < 0:
            raise ConfigError("base_seed must be unsigned")
        if any(e < 1 for e in self.eval_epochs):
            raise ConfigError("eval_epochs must be positive")
        for m in self.methods:
            if m.name == "sharpdro" and self.data.drift_mode:
                raise ConfigError("sharpdro needs state-labelled training data; drift_mode trains on clean data")
            for h in self.grid_for(m):
                if h is None:
                    continue
                if not math.isfinite(h) or h < 0:
                    raise ConfigError(f"bad hyperparameter {h!r} for {m.label}")
                if m.name == "tilted-erm" and h <= 0:
                    raise ConfigError("tilted-erm needs gamma > 0")
        self.model_spec()

    def grid_for(self, method: MethodSpec):
        if not method.has_hyper:
            return (None,)
        return method.grid if method.grid is not None else self.hyper_grid

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.architecture, self.data.input_dim, self.data.num_classes, self.hidden_dim)

    def eval_schedule(self):
        return sorted({e for e in self.eval_epochs if e <= self.epochs} | {self.epochs})

    def batches_per_epoch(self) -> int:
        n_train = int(round(self.data.train_fraction * self.data.samples))
        return math.ceil(n_train / self.batch_size)

    def cells(self):
        """All (method, hyper, trial) keys in output order."""
        return [(m, h, t) for m in self.methods for h in self.grid_for(m) for t in range(self.trials)]

    def to_dict(self):
        return {
            "data": dataclasses.asdict(self.data),
            "model": {"architecture": self.architecture, "hidden_dim": self.hidden_dim},
            "methods": [m.to_dict() for m in self.methods],
            "hyper_grid": list(self.hyper_grid),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "trials": self.trials,
            "base_seed": self.base_seed,
            "eval_epochs": list(self.eval_epochs),
            "schedule": dataclasses.asdict(self.schedule) | {"milestones": list(self.schedule.milestones)},
            "total_steps": self.epochs * self.batches_per_epoch(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("total_steps", None)  # echoed for information only
        _reject_unknown("config", d, {
            "data", "model", "methods", "hyper_grid", "epochs", "batch_size",
            "trials", "base_seed", "eval_epochs", "schedule",
        })
        try:
            data = d.get("data", {})
            _reject_unknown("data", data, {f.name for f in dataclasses.fields(DataConfig)})
            model = d.get("model", {})
            _reject_unknown("model", model, {"architecture", "hidden_dim"})
            sched = dict(d.get("schedule", {}))
            _reject_unknown("schedule", sched, {f.name for f in dataclasses.fields(Schedule)})
            if "milestones" in sched:
                sched["milestones"] = tuple(sched["milestones"])
            return cls(
                data=DataConfig(**data),
                architecture=model.get("architecture", "linear"),
                hidden_dim=model.get("hidden_dim"),
                methods=tuple(MethodSpec.from_dict(m) for m in d.get("methods", [])),
                hyper_grid=tuple(float(h) for h in d.get("hyper_grid", DEFAULT_GRID)),
                epochs=int(d.get("epochs", 200)),
                batch_size=int(d.get("batch_size", 100)),
                trials=int(d.get("trials", 10)),
                base_seed=int(d.get("base_seed", 0)),
                eval_epochs=tuple(int(e) for e in d.get("eval_epochs", (50, 150))),
                schedule=Schedule(**sched),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(raw)


@dataclass
class TrialRecord:
    method: str
    hyper: float | None
    trial: int
    seed: int
    # (epoch, split, EvalReport)
    rows: list = field(default_factory=list)
    selected_epoch: int | None = None
    seconds: float = 0.0
    status: str = "ok"
    error: str = ""
    total_steps: int = 0
    batch_hash: str = ""

    @property
    def key(self):
        return (self.method, self.hyper, self.trial)

    def report(self, epoch, split) -> EvalReport:
        for e, s, r in self.rows:
            if e == epoch and s == split:
                return r
        raise KeyError((epoch, split))


def batch_schedule(seed: int, n: int, epochs: int, batch_size: int):
    """Yields (epoch, index array) for every mini-batch of the run."""
    rng = derive_rng(seed, STREAM_BATCHES)
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield epoch, perm[start:start + batch_size]


def _step_fn(method: MethodSpec, hyper, objective, schedule, model):
    if method.name == "sam":
        return lambda st, b: sam_step(st, b, model, objective, schedule, hyper)
    if method.name == "sharpdro":
        cfg = SharpDROConfig(radius=hyper, prob_step=method.prob_step)
        return lambda st, b: sharpdro_step(st, b, model, schedule, cfg)
    if objective.aggregator == "coce":
        return lambda st, b: coce_sgd_step(st, b, model, objective, schedule)
    return lambda st, b: objective_step(st, b, model, objective, schedule)


def run_cell(cfg: ExperimentConfig, method: MethodSpec, hyper, trial: int, dataset=None) -> TrialRecord:
    seed = cfg.base_seed + trial
    rec = TrialRecord(method.label, hyper, trial, seed)
    t0 = time.perf_counter()
    try:
        if dataset is None:
            dataset = generate_dataset(dataclasses.replace(cfg.data, seed=seed))
        train = dataset.train
        if method.name == "sharpdro" and not train.has_states:
            raise ConfigError("sharpdro needs state-labelled training data")
        model = cfg.model_spec()
        objective = method.objective(hyper)
        n = len(train)
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        rec.total_steps = cfg.epochs * steps_per_epoch
        theta0 = objective.theta.theta if objective.aggregator == "coce" and objective.theta.kind == "joint" else None
        state = TrainState.init(
            model.init_params(derive_rng(seed, STREAM_INIT)),
            total_steps=rec.total_steps,
            num_states=cfg.data.num_states if method.name == "sharpdro" else None,
            theta=theta0,
        )
        step = _step_fn(method, hyper, objective, cfg.schedule, model)
        evals = set(cfg.eval_schedule())
        digest = hashlib.sha256()
        last_epoch = 0
        for epoch, idx in batch_schedule(seed, n, cfg.epochs, cfg.batch_size):
            if epoch != last_epoch and last_epoch in evals:
                _evaluate_into(rec, last_epoch, model, state, dataset, cfg)
            last_epoch = epoch
            digest.update(idx.astype("<i8").tobytes())
            state = step(state, train[idx])
        _evaluate_into(rec, last_epoch, model, state, dataset, cfg)
        rec.batch_hash = digest.hexdigest()[:16]
        rec.selected_epoch = select_model(rec)
    except (CocelabError, FloatingPointError, ValueError) as exc:
        rec.status = "failed"
        rec.error = f"{type(exc).__name__}: {exc}"
        log.warning("cell %s failed: %s", rec.key, rec.error)
    rec.seconds = time.perf_counter() - t0
    return rec


def _evaluate_into(rec, epoch, model, state, dataset, cfg):
    for split in SPLITS:
        rec.rows.append((epoch, split, evaluate(model, state.params, dataset[split], cfg.data.s_max)))


def select_model(record: TrialRecord) -> int:
    """Evaluated epoch with the best validation accuracy; earliest on ties."""
    best_epoch, best = None, -math.inf
    for epoch, split, report in record.rows:
        if split == "val" and report.average_accuracy > best:
            best_epoch, best = epoch, report.average_accuracy
    if best_epoch is None:
        raise ValueError("record has no validation evaluations")
    return best_epoch


def _cell_job(args):
    cfg, method, hyper, trial = args
    return run_cell(cfg, method, hyper, trial)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1):
    """Runs every cell; failed cells are recorded, never raised."""
    order = {(m.label, h, t): k for k, (m, h, t) in enumerate(cfg.cells())}
    cells = cfg.cells()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_cell_job, [(cfg, m, h, t) for m, h, t in cells]))
    else:
        records, cache = [], {}
        for m, h, t in cells:
            if t not in cache:
                cache[t] = generate_dataset(dataclasses.replace(cfg.data, seed=cfg.base_seed + t))
            records.append(run_cell(cfg, m, h, t, dataset=cache[t]))
    return sorted(records, key=lambda r: order[r.key])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def summarize(records):
    """Mean and sample std over trials of selected-epoch test metrics, per (method, hyper)."""
    cells: dict = {}
    for r in records:
        cells.setdefault((r.method, r.hyper), []).append(r)
    out = []
    for (method, hyper), recs in cells.items():
        ok = [r for r in recs if r.status == "ok"]
        row = {"method": method, "hyper": hyper, "trials": len(ok), "failed": len(recs) - len(ok),
               "single_trial": len(ok) == 1}
        for metric in SUMMARY_METRICS:
            vals = [getattr(r.report(r.selected_epoch, "test"), metric) for r in ok]
            vals = [v for v in vals if v is not None]
            row[f"{metric}_mean"] = statistics.fmean(vals) if vals else math.nan
            row[f"{metric}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        val_acc = [r.report(r.selected_epoch, "val").average_accuracy for r in ok]
        row["val_accuracy_mean"] = statistics.fmean(val_acc) if val_acc else math.nan
        out.append(row)
    return out


def best_hyper(summary_rows, method: str):
    """Row of ``method`` with the highest mean validation accuracy (first on ties)."""
    rows = [r for r in summary_rows if r["method"] == method and r["trials"] > 0]
    if not rows:
        raise KeyError(method)
    return max(rows, key=lambda r: r["val_accuracy_mean"])


RECORD_FIELDS = ("method", "hyper", "trial", "epoch", "split", "metric", "value")
CELL_FIELDS = ("method", "hyper", "trial", "seed", "status", "selected_epoch", "total_steps",
               "batch_hash", "seconds", "error")


def summary_fields():
    cols = ["method", "hyper", "trials", "failed", "single_trial"]
    for m in SUMMARY_METRICS:
        cols += [f"{m}_mean", f"{m}_std"]
    return cols + ["val_accuracy_mean"]


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_records(records, path):
    rows = []
    for r in records:
        for epoch, split, report in r.rows:
            for metric, value in report.metrics():
                rows.append([r.method, _fmt(r.hyper), r.trial, epoch, split, metric, _fmt(value)])
    _write_csv(path, RECORD_FIELDS, rows)


def write_cells(records, path):
    _write_csv(path, CELL_FIELDS, [
        [r.method, _fmt(r.hyper), r.trial, r.seed, r.status, _fmt(r.selected_epoch), r.total_steps,
         r.batch_hash, f"{r.seconds:.3f}", r.error]
        for r in records
    ])


def write_summary(summary_rows, path):
    cols = summary_fields()
    _write_csv(path, cols, [[_fmt(row[c]) if not isinstance(row[c], (bool, str)) else str(row[c]) for c in cols]
                            for row in summary_rows])


def write_outputs(records, cfg: ExperimentConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records(records, out / "records.csv")
    write_cells(records, out / "cells.csv")
    write_summary(summarize(records), out / "summary.csv")
    with open(out / "config-echo.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_records(out_dir):
    """Rebuild TrialRecords from records.csv and cells.csv."""
    out = Path(out_dir)
    recs = {}
    with open(out / "cells.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            hyper = float(row["hyper"]) if row["hyper"] else None
            key = (row["method"], hyper, int(row["trial"]))
            recs[key] = TrialRecord(
                row["method"], hyper, int(row["trial"]), int(row["seed"]),
                selected_epoch=int(row["selected_epoch"]) if row["selected_epoch"] else None,
                seconds=float(row["seconds"]), status=row["status"], error=row["error"],
                total_steps=int(row["total_steps"]), batch_hash=row["batch_hash"],
            )
    metrics: dict = {}
    with open(out / "records.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            hyper = float(row["hyper"]) if row["hyper"] else None
            k = ((row["method"], hyper, int(row["trial"])), int(row["epoch"]), row["split"])
            metrics.setdefault(k, {})[row["metric"]] = float(row["value"])
    for (key, epoch, split), m in metrics.items():
        if key not in recs:
            raise ValueError(f"records.csv row for unknown cell {key}")
        report = EvalReport(
            average_accuracy=m["average_accuracy"], average_loss=m["average_loss"], param_l2=m["param_l2"],
            balanced_accuracy=m.get("balanced_accuracy"), max_balance_gap=m.get("max_balance_gap"),
            per_state_loss={int(n[5:-5]): v for n, v in m.items() if n.startswith("state") and n.endswith("_loss")},
            per_state_error={int(n[5:-6]): v for n, v in m.items() if n.startswith("state") and n.endswith("_error")},
        )
        recs[key].rows.append((epoch, split, report))
    return list(recs.values())
