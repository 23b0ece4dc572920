"""Command line: run, sweep, fine-tune, probe and classify.

Exit status: 0 completed, 1 diverged run (or failed invariance audit),
2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, parse_grid
from .instrument import InsufficientDataError
from .runner import (STATUS_COMPLETED, IncompatibleCheckpointError, build_problem, fine_tune, label_run,
                     read_trajectory, run, sweep)

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG = 0, 1, 2


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.output_dir:
        cfg = cfg.with_output_dir(args.output_dir)
    overrides = {k: getattr(args, f"seed_{k}") for k in ("init", "data", "batch", "optimizer")
                 if getattr(args, f"seed_{k}") is not None}
    if overrides:
        seeds = dataclasses.replace(cfg.training.seeds, **overrides)
        cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, seeds=seeds))
    return cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_run(args) -> int:
    out = run(_load_config(args))
    _print({"output_dir": str(out.directory), "status": out.status, "regime": out.summary["regime"]})
    return EXIT_OK if out.status == STATUS_COMPLETED else EXIT_DIVERGED


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    rows = sweep(cfg, parse_grid(args.grid), cfg.output_dir, workers=args.workers,
                 decouple_seeds=args.decouple_seeds)
    for r in rows:
        print(f"{r['rate']:<10g} {r['regime']:<24s} {r['status']}")
    return EXIT_OK


def cmd_fine_tune(args) -> int:
    config = RunConfig.load(args.config) if args.config else None
    out = fine_tune(args.checkpoint, args.rate, args.epochs, args.output_dir, config)
    _print({"output_dir": str(out.directory), "status": out.status, "regime": out.summary["regime"]})
    return EXIT_OK if out.status == STATUS_COMPLETED else EXIT_DIVERGED


def cmd_probe(args) -> int:
    from . import probes
    if args.kind == "interpolate":
        if len(args.inputs) != 2:
            raise ConfigError("inputs", "interpolate needs two checkpoints")
        report = probes.interpolate(args.inputs[0], args.inputs[1], args.points, args.output_dir)
    elif args.kind == "random-walk":
        report = probes.random_walk(args.inputs, args.output_dir, epochs=args.epochs,
                                    step_size=args.step_size, seed=args.seed)
    else:
        if len(args.inputs) != 1:
            raise ConfigError("inputs", "invariance-audit needs one checkpoint")
        report = probes.invariance_audit(args.inputs[0], args.output_dir)
        _print(report)
        return EXIT_OK if report["passed"] else EXIT_DIVERGED
    _print(report)
    return EXIT_OK


def cmd_classify(args) -> int:
    path = Path(args.trajectory)
    cfg_path = Path(args.config) if args.config else path.parent / "config.json"
    problem = build_problem(RunConfig.load(cfg_path))
    records = read_trajectory(path)
    diverged = any(not r.is_finite() for r in records)
    label = label_run(problem, records, diverged)
    _print({"regime": label.label, "evidence": label.evidence})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sphere-regimes", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp):
        sp.add_argument("--config", required=True, help="run configuration (JSON)")
        sp.add_argument("--output-dir", help="override output_dir from the config")
        for k in ("init", "data", "batch", "optimizer"):
            sp.add_argument(f"--seed-{k}", type=int, help=f"override the {k} seed")

    sp = sub.add_parser("run", help="single training run")
    config_flags(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="one run per rate")
    config_flags(sp)
    sp.add_argument("--grid", required=True, help="'paper-grid(kmin,kmax)' or comma-separated rates")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--decouple-seeds", action="store_true", help="give every rate its own seeds")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("fine-tune", help="continue a checkpoint with a new rate")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--rate", type=float, required=True)
    sp.add_argument("--epochs", type=int, required=True)
    sp.add_argument("--output-dir", required=True)
    sp.add_argument("--config", help="replacement config (layout must match the checkpoint)")
    sp.set_defaults(func=cmd_fine_tune)

    sp = sub.add_parser("probe", help="interpolate, random-walk or invariance-audit")
    sp.add_argument("kind", choices=("interpolate", "random-walk", "invariance-audit"))
    sp.add_argument("inputs", nargs="+", help="checkpoints (interpolate, audit) or run directories (walk)")
    sp.add_argument("--output-dir", required=True)
    sp.add_argument("--points", type=int, default=41)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--step-size", type=float)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("classify", help="re-run the regime classifier on a trajectory CSV")
    sp.add_argument("trajectory")
    sp.add_argument("--config", help="config of the run (default: config.json beside the CSV)")
    sp.set_defaults(func=cmd_classify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IncompatibleCheckpointError, InsufficientDataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
