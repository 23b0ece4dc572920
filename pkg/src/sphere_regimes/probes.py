"""Probes on finished runs: loss along a chord between two solutions, a random-walk
baseline compared with real runs, and a scale-invariance audit of a checkpoint."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .core import COS_EPS, GroupedParams, check_scale_invariance
from .instrument import adjacent_cosine_distance, linear_interpolation_probe, mean_loss, tail_records
from .optim import random_walk_update
from .runner import (IncompatibleCheckpointError, build_problem, fmt, json_safe, load_checkpoint,
                     read_trajectory)
from .training import Problem

AUDIT_SCALES = (0.1, 0.5, 2.0, 3.7)
AUDIT_OUTPUT_TOL = 1e-9
AUDIT_GRAD_TOL = 1e-8
CHANCE_BAND = 0.10


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(json_safe(obj), indent=2, sort_keys=True) + "\n")


def _params(problem: Problem, theta: np.ndarray) -> GroupedParams:
    return GroupedParams(theta, problem.layout, float(np.linalg.norm(theta)))


# ---------------------------------------------------------------- interpolation

def interpolate(checkpoint_a, checkpoint_b, num_points: int, output_dir) -> dict:
    state_a, cfg_a, _ = load_checkpoint(checkpoint_a)
    state_b, _, _ = load_checkpoint(checkpoint_b)
    problem = build_problem(cfg_a)
    if state_a.theta.shape != state_b.theta.shape:
        raise IncompatibleCheckpointError("checkpoints have different parameter layouts")
    pa = GroupedParams(state_a.theta, problem.layout, state_a.radius)
    pb = GroupedParams(state_b.theta * (state_a.radius / np.linalg.norm(state_b.theta)), problem.layout,
                       state_a.radius)
    profile = linear_interpolation_probe(problem.objective, pa, pb, num_points, problem.eval_batches("train"))
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interpolation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("tau", "loss"))
        for t, l in zip(profile.taus, profile.losses):
            w.writerow((fmt(t), fmt(l)))
    report = {"probe": "interpolate", "checkpoint_a": str(checkpoint_a), "checkpoint_b": str(checkpoint_b),
              "points": num_points, "barrier": profile.barrier,
              "endpoint_losses": [profile.losses[0], profile.losses[-1]], "max_loss": float(np.max(profile.losses))}
    _write_json(out / "interpolation.json", report)
    return report


# ---------------------------------------------------------------- random walk

@dataclass
class WalkTrace:
    steps: np.ndarray
    losses: np.ndarray
    mean_abs_increment_cos: float       # tangential parts of adjacent increments
    mean_abs_chord_cos: float           # raw chords theta_{t+1} - theta_t
    mean_cos_dist: float


def step_size_for_cos_dist(radius: float, cos_dist: float) -> float:
    """Pre-projection step length whose projected move has the given adjacent cosine distance.

    A step of length s orthogonal to theta turns it by atan(s / radius); a
    Gaussian direction in high dimension is nearly orthogonal.
    """
    angle = math.acos(max(-1.0, 1.0 - cos_dist))
    return radius * math.tan(min(angle, 0.5 * math.pi - 1e-9))


def random_walk_trace(problem: Problem, theta0: np.ndarray, step_size: float, steps: int, eval_every: int,
                      seed: int) -> WalkTrace:
    """Projected Gaussian walk from ``theta0``; loss is evaluated every ``eval_every`` steps.

    A chord between two points on the sphere always leans towards the
    centre, so adjacent chords are anti-correlated by about -(1 - c) / 2
    for steps of angular cosine c. The walk's directions are judged on the
    tangential parts of the increments instead; both are reported.
    """
    rng = np.random.default_rng(seed)
    radius = float(np.linalg.norm(theta0))
    theta = np.array(theta0, dtype=np.float64)
    batches = problem.eval_batches("train")
    at, losses = [0], [mean_loss(problem.objective, theta, batches)]
    tan_cos, chord_cos, dists = [], [], []
    prev_inc = prev_tan = None
    for t in range(1, steps + 1):
        new, _ = random_walk_update(theta, step_size, radius, rng)
        inc = new - theta
        unit = theta / radius
        tan = inc - np.dot(inc, unit) * unit
        if prev_inc is not None:
            chord_cos.append(_abs_cos(inc, prev_inc))
            tan_cos.append(_abs_cos(tan, prev_tan))
        dists.append(adjacent_cosine_distance(theta, new))
        prev_inc, prev_tan, theta = inc, tan, new
        if t % eval_every == 0:
            at.append(t)
            losses.append(mean_loss(problem.objective, theta, batches))
    return WalkTrace(np.array(at), np.array(losses), float(np.mean(tan_cos)), float(np.mean(chord_cos)),
                     float(np.mean(dists)))


def _abs_cos(a: np.ndarray, b: np.ndarray) -> float:
    return abs(float(np.dot(a, b))) / (float(np.linalg.norm(a) * np.linalg.norm(b)) + COS_EPS)


def random_walk(run_dirs, output_dir, epochs: int = 100, step_size: float | None = None, seed: int = 0) -> dict:
    """Random walk from the first run's initialization, compared with every listed run.

    The step size defaults to the one that reproduces the first run's tail
    adjacent cosine distance. One walk step corresponds to one mini-batch step.
    """
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ValueError("need at least one run directory to pair with")
    cfg = RunConfig.load(run_dirs[0] / "config.json")
    problem = build_problem(cfg)
    radius = float(np.linalg.norm(problem.init_theta))
    compared = []
    for d in run_dirs:
        tail = tail_records([r for r in read_trajectory(d / "trajectory.csv") if r.is_finite()])
        summary = json.loads((d / "summary.json").read_text())
        compared.append({"run": str(d), "regime": summary["regime"], "rate": summary["rate"],
                         "tail_cos_dist": float(np.nanmean([r.cos_dist for r in tail])),
                         "tail_loss": float(np.mean([r.train_loss for r in tail]))})
    if step_size is None:
        step_size = step_size_for_cos_dist(radius, compared[0]["tail_cos_dist"])
    per_epoch = 1 if problem.full_batch else len(problem.eval_batches("train"))
    trace = random_walk_trace(problem, problem.init_theta, step_size, epochs * per_epoch, per_epoch, seed)
    lo, hi = problem.chance_level * (1 - CHANCE_BAND), problem.chance_level * (1 + CHANCE_BAND)
    after = trace.losses[1:]
    for c in compared:
        c["smaller_cos_dist_than_walk"] = c["tail_cos_dist"] < trace.mean_cos_dist
    report = {"probe": "random-walk", "dimension": problem.layout.dim, "step_size": step_size,
              "steps": int(trace.steps[-1]), "mean_abs_increment_cos": trace.mean_abs_increment_cos,
              "mean_abs_chord_cos": trace.mean_abs_chord_cos,
              "walk_cos_dist": trace.mean_cos_dist, "chance_level": problem.chance_level, "band": [lo, hi],
              "loss_mean": float(np.mean(after)), "loss_min": float(np.min(after)),
              "loss_max": float(np.max(after)),
              "within_band": bool(np.all((after >= lo) & (after <= hi))),
              "compared_runs": compared}
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "random_walk.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss"))
        for s, l in zip(trace.steps, trace.losses):
            w.writerow((fmt(int(s)), fmt(l)))
    _write_json(out / "random_walk.json", report)
    return report


# ---------------------------------------------------------------- invariance audit

def invariance_audit(checkpoint, output_dir, scales=AUDIT_SCALES) -> dict:
    """Scale every group of a checkpoint by each factor and compare outputs and gradients."""
    state, cfg, _ = load_checkpoint(checkpoint)
    problem = build_problem(cfg)
    if state.theta.shape[0] != problem.layout.dim:
        raise IncompatibleCheckpointError("checkpoint does not match its own config")
    params = _params(problem, state.theta)
    batch = problem.eval_batches("train")[0]
    rows = []
    for g in range(problem.layout.n_groups):
        for c in scales:
            chk = check_scale_invariance(problem.objective, params, g, c, batch)
            rows.append((problem.layout.names[g], c, chk.value_deviation, chk.output_deviation,
                         chk.grad_rel_deviation))
    max_out = max(r[3] for r in rows)
    max_grad = max(r[4] for r in rows)
    report = {"probe": "invariance-audit", "checkpoint": str(checkpoint), "scales": list(scales),
              "max_output_deviation": max_out, "max_grad_rel_deviation": max_grad,
              "output_tol": AUDIT_OUTPUT_TOL, "grad_tol": AUDIT_GRAD_TOL,
              "passed": bool(max_out <= AUDIT_OUTPUT_TOL and max_grad <= AUDIT_GRAD_TOL)}
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "invariance_audit.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("group", "scale", "value_deviation", "output_deviation", "grad_rel_deviation"))
        for name, c, v, o, gr in rows:
            w.writerow((name, fmt(c), fmt(v), fmt(o), fmt(gr)))
    _write_json(out / "invariance_audit.json", report)
    return report
