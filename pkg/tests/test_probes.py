import json
import math

import numpy as np
import pytest

from sphere_regimes.config import DatasetConfig, MlpConfig, ObjectiveConfig, RunConfig, TrainingConfig, toy_config
from sphere_regimes.probes import interpolate, invariance_audit, random_walk, step_size_for_cos_dist
from sphere_regimes.runner import IncompatibleCheckpointError, run


def tiny(out, elr, epochs=3):
    cfg = RunConfig(objective=ObjectiveConfig(mlp=MlpConfig(hidden_dims=(8, 5)),
                                              dataset=DatasetConfig(samples_per_class=20, input_dim=6)),
                    training=TrainingConfig(epochs=epochs, batch_size=10), output_dir=str(out))
    return cfg.with_rate(elr)


def test_step_size_inverts_cos_dist():
    s = step_size_for_cos_dist(2.0, 0.3)
    # the projected move of an orthogonal step s turns theta by atan(s / radius)
    assert 1.0 - math.cos(math.atan(s / 2.0)) == pytest.approx(0.3)


def test_interpolate_between_runs(tmp_path):
    run(toy_config(elr=0.05, steps=500, seed=1, output_dir=str(tmp_path / "a")))
    run(toy_config(elr=0.05, steps=500, seed=2, output_dir=str(tmp_path / "b")))
    rep = interpolate(tmp_path / "a" / "checkpoint.npz", tmp_path / "b" / "checkpoint.npz", 41, tmp_path / "i")
    rows = (tmp_path / "i" / "interpolation.csv").read_text().splitlines()
    assert rows[0] == "tau,loss" and len(rows) == 42
    assert json.loads((tmp_path / "i" / "interpolation.json").read_text())["points"] == 41
    assert rep["barrier"] <= rep["max_loss"] - max(rep["endpoint_losses"]) + 1e-12


def test_interpolate_rejects_mismatched_layouts(tmp_path):
    run(toy_config(alphas=(1.0, 2.0), steps=10, output_dir=str(tmp_path / "a")))
    run(toy_config(alphas=(1.0, 2.0, 4.0), steps=10, output_dir=str(tmp_path / "b")))
    with pytest.raises(IncompatibleCheckpointError):
        interpolate(tmp_path / "a" / "checkpoint.npz", tmp_path / "b" / "checkpoint.npz", 5, tmp_path / "i")


def test_random_walk_report(tmp_path):
    run(tiny(tmp_path / "hot", 5.0))
    run(tiny(tmp_path / "cool", 0.01))
    rep = random_walk([tmp_path / "hot", tmp_path / "cool"], tmp_path / "w", epochs=5)
    assert rep["dimension"] == 6 * 8 + 8 * 5
    assert rep["steps"] == 5 * 5          # 48 training samples in batches of 10
    assert 0.0 <= rep["mean_abs_increment_cos"] <= 1.0
    assert rep["compared_runs"][1]["smaller_cos_dist_than_walk"]
    assert (tmp_path / "w" / "random_walk.csv").read_text().startswith("step,loss\n")


def test_invariance_audit(tmp_path):
    run(tiny(tmp_path / "r", 0.05))
    rep = invariance_audit(tmp_path / "r" / "checkpoint.npz", tmp_path / "audit")
    assert rep["passed"] and rep["max_output_deviation"] <= 1e-9
    rows = (tmp_path / "audit" / "invariance_audit.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 4
