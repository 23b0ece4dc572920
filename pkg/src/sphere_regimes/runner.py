"""Config-driven runs, rate sweeps and fine-tuning, with CSV/JSON outputs.

Every run directory holds ``config.json``, ``trajectory.csv`` (one row per
logged step), ``summary.json`` and ``checkpoint.npz``. Sweeps add
``aggregate.csv`` with one row per rate.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import inject_label_noise, load_idx, load_mnist, make_blobs
from .instrument import (CE_CONV_FLOOR, R3, UNDETERMINED, InsufficientDataError, RegimeLabel, StepRecord,
                         classify_regime, equilibration_stats, tail_records)
from .net import build_si_mlp
from .toy import ToySystem, oracle_for
from .training import Problem, TrainResult, TrainState, train

# Toy runs count as converged once F drops below this level (the "fast decay" level).
TOY_CONV_LEVEL = 1e-4

SCALAR_COLUMNS = ("step", "epoch", "train_loss", "train_error", "test_loss", "test_error", "lr", "elr",
                  "eff_grad", "ess", "sharpness", "grad_cov_trace", "cos_dist", "min_prestep_ratio",
                  "max_norm_drift")
GROUP_COLUMNS = ("rho", "elr", "eff_grad", "ess")
AGGREGATE_COLUMNS = ("rate", "final_loss", "final_test_error", "tail_sharpness", "regime", "status")
SUMMARY_FIELDS = ("kind", "status", "rate", "mode", "epochs", "steps", "records", "regime", "regime_evidence",
                  "final", "tail", "equilibration", "oracle", "parent")

STATUS_COMPLETED = "completed"
STATUS_DIVERGED = "diverged"
STATUS_FAILED = "failed"


class IncompatibleCheckpointError(ValueError):
    pass


def fmt(x) -> str:
    """Round-trip exact text for a number: integers as is, floats with 17 significant digits."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return "%.17g" % float(x)


# ---------------------------------------------------------------- problem setup

def build_problem(cfg: RunConfig) -> Problem:
    obj = cfg.objective
    seeds = cfg.training.seeds
    if obj.kind == "toy":
        system = ToySystem(np.array(obj.alphas))
        init = system.initial_point(seeds.init, obj.toy_radius)
        # a uniformly random direction gives each term half its coefficient on average
        return Problem(system, init.values, 0.5 * float(np.sum(system.alphas)), 0.0,
                       conv_level=TOY_CONV_LEVEL)
    d = obj.dataset
    if d.kind == "blobs":
        dataset = make_blobs(d.num_classes, d.samples_per_class, d.input_dim, d.separation, seeds.data)
    else:
        if d.test_images:
            dataset = load_mnist(d.train_images, d.train_labels, d.test_images, d.test_labels, d.num_classes)
        else:
            dataset = load_idx(d.train_images, d.train_labels, d.num_classes)
        if dataset.input_dim != d.input_dim:
            raise ConfigError("objective.dataset.input_dim",
                              f"files have {dataset.input_dim} features, config says {d.input_dim}")
    if obj.label_noise > 0:
        dataset = inject_label_noise(dataset, obj.label_noise, obj.label_noise_seed)
    net, params = build_si_mlp(cfg.mlp_spec())
    return Problem(net, params.values, math.log(d.num_classes), CE_CONV_FLOOR, dataset,
                   cfg.training.batch_size)


def label_run(problem: Problem, records: list[StepRecord], diverged: bool) -> RegimeLabel:
    if diverged:
        return RegimeLabel(R3, {"non_finite": True})
    try:
        return classify_regime(records, problem.chance_level, problem.conv_floor,
                               conv_level=problem.conv_level)
    except InsufficientDataError as exc:
        return RegimeLabel(UNDETERMINED, {"reason": str(exc)})


# ---------------------------------------------------------------- trajectory files

def trajectory_header(n_groups: int) -> list[str]:
    cols = list(SCALAR_COLUMNS)
    for name in GROUP_COLUMNS:
        cols += [f"{name}_{i}" for i in range(n_groups)]
    return cols


def write_trajectory(path, records: list[StepRecord], n_groups: int) -> None:
    nan_groups = np.full(n_groups, math.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_header(n_groups))
        for r in records:
            row = [fmt(getattr(r, c)) for c in SCALAR_COLUMNS]
            for arr in (r.rho, r.group_elr, r.group_eff_grad, r.group_ess):
                arr = arr if len(arr) == n_groups else nan_groups
                row += [fmt(v) for v in arr]
            w.writerow(row)


def read_trajectory(path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_groups = (len(header) - len(SCALAR_COLUMNS)) // len(GROUP_COLUMNS)
    if header != trajectory_header(n_groups):
        raise ValueError(f"{path}: unexpected trajectory header")
    out = []
    for row in body:
        vals = {c: row[i] for i, c in enumerate(SCALAR_COLUMNS)}
        kw = {c: (int(v) if c in ("step", "epoch") else float(v)) for c, v in vals.items()}
        base = len(SCALAR_COLUMNS)
        g = [np.array([float(x) for x in row[base + k * n_groups: base + (k + 1) * n_groups]])
             for k in range(len(GROUP_COLUMNS))]
        out.append(StepRecord(rho=g[0], group_elr=g[1], group_eff_grad=g[2], **kw))
    return out


# ---------------------------------------------------------------- summaries

def _finite_mean(values) -> float:
    v = np.array(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(np.mean(v)) if v.size else math.nan


def json_safe(obj):
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def summarize(cfg: RunConfig, problem: Problem, result: TrainResult, kind: str = "run",
              parent: dict | None = None) -> dict:
    records = result.records
    label = label_run(problem, records, result.diverged)
    last = records[-1] if records else None
    finite = [r for r in records if r.is_finite()]
    tail = tail_records(finite) if finite else []
    summary = {
        "kind": kind,
        "status": STATUS_DIVERGED if result.diverged else STATUS_COMPLETED,
        "rate": cfg.rate,
        "mode": cfg.optimizer.mode,
        "epochs": result.state.epoch,
        "steps": result.state.step,
        "records": len(records),
        "regime": label.label,
        "regime_evidence": label.evidence,
        "final": {k: getattr(last, k) if last else math.nan
                  for k in ("train_loss", "train_error", "test_loss", "test_error", "sharpness", "elr")},
        "tail": {"loss": _finite_mean([r.train_loss for r in tail]),
                 "test_error": _finite_mean([r.test_error for r in tail]),
                 "sharpness": _finite_mean([r.sharpness for r in tail]),
                 "grad_cov_trace": _finite_mean([r.grad_cov_trace for r in tail]),
                 "cos_dist": _finite_mean([r.cos_dist for r in tail])},
        "equilibration": None,
        "oracle": None,
        "parent": parent,
    }
    try:
        summary["equilibration"] = equilibration_stats(tail).as_dict()
    except InsufficientDataError:
        pass
    if cfg.objective.kind == "toy" and cfg.optimizer.mode == "projected-sphere":
        summary["oracle"] = toy_oracle_comparison(problem.objective, cfg.optimizer.elr, tail)
    return json_safe(summary)


def toy_oracle_comparison(system: ToySystem, elr: float, tail: list[StepRecord]) -> dict:
    o = oracle_for(system, elr)
    out = {"total_elr": o.total_elr, "convergence_threshold": o.convergence_threshold,
           "predicted_regime": o.predicted_regime, "equilibrium_elrs": o.equilibrium_elrs,
           "equilibrium_value": o.equilibrium_value, "equilibrium_ess_sq": o.equilibrium_ess_sq,
           "value_lower_bound": o.value_lower_bound}
    if tail:
        elrs = np.mean([r.group_elr for r in tail], axis=0)
        ess_sq = np.mean([r.group_ess ** 2 for r in tail], axis=0)
        value = float(np.mean([r.train_loss for r in tail]))
        out.update(measured_elrs=elrs, measured_ess_sq=ess_sq, measured_value=value,
                   elr_rel_error=np.abs(elrs - o.equilibrium_elrs) / o.equilibrium_elrs)
    return out


# ---------------------------------------------------------------- run / fine-tune

@dataclass
class RunOutput:
    directory: Path
    summary: dict
    result: TrainResult

    @property
    def status(self) -> str:
        return self.summary["status"]


def _checkpoint_meta(cfg: RunConfig, problem: Problem) -> dict:
    return {"config": cfg.to_dict(), "layout_sizes": [n for _, n in problem.layout.spans]}


def _write_outputs(cfg: RunConfig, problem: Problem, result: TrainResult, out_dir: Path,
                   kind: str, parent: dict | None) -> RunOutput:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")
    write_trajectory(out_dir / "trajectory.csv", result.records, problem.layout.n_groups)
    (out_dir / "checkpoint.npz").write_bytes(result.state.to_bytes(_checkpoint_meta(cfg, problem)))
    summary = summarize(cfg, problem, result, kind, parent)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunOutput(out_dir, summary, result)


def run(cfg: RunConfig) -> RunOutput:
    """Train from the configured initialization and write all outputs to ``cfg.output_dir``."""
    problem = build_problem(cfg)
    seeds = cfg.training.seeds
    state = TrainState.fresh(problem.init_theta, seeds.batch, seeds.optimizer)
    result = train(problem, cfg.optimizer_config(), cfg.training.epochs, cfg.log_every, state)
    return _write_outputs(cfg, problem, result, Path(cfg.output_dir), "run", None)


def load_checkpoint(path) -> tuple[TrainState, RunConfig, dict]:
    state, meta = TrainState.from_bytes(Path(path).read_bytes())
    return state, RunConfig.from_dict(meta["config"]), meta


def fine_tune(checkpoint, rate: float, epochs: int, output_dir, config: RunConfig | None = None) -> RunOutput:
    """Continue a checkpointed run with a new rate.

    With the parent's own rate the continuation reproduces the uninterrupted
    run bit-exactly (its first record is the first step after the checkpoint).
    ``config`` replaces the parent's objective and training settings; its
    parameter layout must match the checkpoint.
    """
    state, parent_cfg, meta = load_checkpoint(checkpoint)
    base = config if config is not None else parent_cfg
    if base.optimizer.mode != parent_cfg.optimizer.mode:
        raise IncompatibleCheckpointError("optimizer mode differs from the parent run")
    cfg = base.with_rate(rate).with_output_dir(output_dir)
    cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, epochs=int(epochs)))
    problem = build_problem(cfg)
    sizes = [n for _, n in problem.layout.spans]
    if sizes != list(meta["layout_sizes"]) or state.theta.shape[0] != problem.layout.dim:
        raise IncompatibleCheckpointError(f"checkpoint layout {meta['layout_sizes']} does not match {sizes}")
    parent = {"checkpoint": str(Path(checkpoint)), "parent_rate": parent_cfg.rate,
              "parent_output_dir": parent_cfg.output_dir, "step": state.step, "epoch": state.epoch}
    result = train(problem, cfg.optimizer_config(), epochs, cfg.log_every, state, log_initial=False)
    return _write_outputs(cfg, problem, result, Path(output_dir), "fine-tune", parent)


# ---------------------------------------------------------------- sweeps

def _run_dir_name(rate: float) -> str:
    return f"rate_{rate:.6g}"


def _sweep_one(cfg_dict: dict) -> dict:
    cfg = RunConfig.from_dict(cfg_dict)
    row = {"rate": cfg.rate, "final_loss": math.nan, "final_test_error": math.nan,
           "tail_sharpness": math.nan, "regime": "", "status": STATUS_FAILED}
    try:
        out = run(cfg)
    except Exception as exc:  # crash isolation: record and move on
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        (Path(cfg.output_dir) / "error.txt").write_text(traceback.format_exc())
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    s = out.summary
    nan_if_none = lambda v: math.nan if v is None else v
    row.update(final_loss=nan_if_none(s["final"]["train_loss"]),
               final_test_error=nan_if_none(s["final"]["test_error"]),
               tail_sharpness=nan_if_none(s["tail"]["sharpness"]), regime=s["regime"], status=s["status"])
    return row


def _decoupled(cfg: RunConfig, k: int) -> RunConfig:
    s = cfg.training.seeds
    seeds = dataclasses.replace(s, init=s.init + k, batch=s.batch + k, optimizer=s.optimizer + k)
    return dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, seeds=seeds))


def sweep(base: RunConfig, rates, output_dir, workers: int = 1, decouple_seeds: bool = False) -> list[dict]:
    """One run per rate; failed runs are marked, never fatal.

    All runs share the base seeds unless ``decouple_seeds`` is set, in which
    case the k-th rate offsets the init, batch-order and optimizer seeds by k.
    """
    rates = sorted(float(r) for r in rates)
    if not rates:
        raise ConfigError("grid", "rate grid is empty")
    out = Path(output_dir)
    jobs = []
    for k, r in enumerate(rates):
        cfg = base.with_rate(r).with_output_dir(out / _run_dir_name(r))
        jobs.append((_decoupled(cfg, k) if decouple_seeds else cfg).to_dict())
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    rows.sort(key=lambda r: r["rate"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for r in rows:
            w.writerow([fmt(r["rate"]), fmt(r["final_loss"]), fmt(r["final_test_error"]),
                        fmt(r["tail_sharpness"]), r["regime"], r["status"]])
    return rows


def read_aggregate(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("rate", "final_loss", "final_test_error", "tail_sharpness"):
            r[k] = float(r[k])
    return rows
