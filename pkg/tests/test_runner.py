import csv
import dataclasses
import json

import numpy as np
import pytest

from sphere_regimes import runner
from sphere_regimes.cli import main
from sphere_regimes.config import (ConfigError, DatasetConfig, MlpConfig, ObjectiveConfig, RunConfig,
                                   TrainingConfig, toy_config)
from sphere_regimes.instrument import R1, R2, R3, REGIME_ORDER
from sphere_regimes.runner import (AGGREGATE_COLUMNS, SUMMARY_FIELDS, IncompatibleCheckpointError, fine_tune,
                                   read_aggregate, read_trajectory, run, sweep, trajectory_header)


def tiny_net_config(out, epochs=4, **opt):
    cfg = RunConfig(objective=ObjectiveConfig(mlp=MlpConfig(hidden_dims=(8, 5)),
                                              dataset=DatasetConfig(samples_per_class=20, input_dim=6)),
                    training=TrainingConfig(epochs=epochs, batch_size=10), output_dir=str(out))
    return dataclasses.replace(cfg, optimizer=dataclasses.replace(cfg.optimizer, **opt)) if opt else cfg


def test_toy_run_outputs(tmp_path):
    out = run(toy_config(elr=0.2, steps=20000, output_dir=str(tmp_path / "toy")))
    d = tmp_path / "toy"
    assert {p.name for p in d.iterdir()} == {"config.json", "trajectory.csv", "summary.json", "checkpoint.npz"}
    summary = json.loads((d / "summary.json").read_text())
    assert tuple(sorted(summary)) == tuple(sorted(SUMMARY_FIELDS))
    assert summary["regime"] == R2 and summary["status"] == "completed"
    np.testing.assert_allclose(summary["oracle"]["measured_elrs"], [1.4, 0.7, 0.35], rtol=0.2)
    assert RunConfig.load(d / "config.json") == toy_config(elr=0.2, steps=20000, output_dir=str(d))
    assert out.summary == summary


def test_trajectory_csv_format(tmp_path):
    run(toy_config(elr=0.2, steps=50, output_dir=str(tmp_path)))
    text = (tmp_path / "trajectory.csv").read_text()
    assert text.endswith("\n") and "\r" not in text
    rows = list(csv.reader(text.splitlines()))
    assert rows[0] == trajectory_header(3)
    assert rows[0][-1] == "ess_2" and len(rows) == 1 + 6
    recs = read_trajectory(tmp_path / "trajectory.csv")
    # 17 significant digits read back exactly
    assert "%.17g" % recs[3].train_loss == rows[4][2]
    np.testing.assert_allclose(recs[2].group_ess, [float(x) for x in rows[3][-3:]], rtol=1e-15)


def test_toy_grid_is_ordered_and_brackets_threshold(tmp_path):
    rates = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0]
    rows = sweep(toy_config(steps=20000), rates, tmp_path)
    labels = [r["regime"] for r in rows]
    assert [r["rate"] for r in rows] == rates
    order = [REGIME_ORDER[l] for l in labels]
    assert order == sorted(order) and set(labels) == {R1, R2, R3}
    last_r1 = max(r for r, l in zip(rates, labels) if l == R1)
    first_r2 = min(r for r, l in zip(rates, labels) if l == R2)
    assert last_r1 < 1 / 7 < first_r2
    agg = read_aggregate(tmp_path / "aggregate.csv")
    assert list(agg[0]) == list(AGGREGATE_COLUMNS)


def test_sweep_isolates_failures(tmp_path, monkeypatch):
    real_run = runner.run

    def flaky(cfg):
        if cfg.rate == 0.2:
            raise RuntimeError("boom")
        return real_run(cfg)

    monkeypatch.setattr(runner, "run", flaky)
    rows = sweep(toy_config(steps=30), [0.5, 0.2, 0.1], tmp_path)
    assert [r["status"] for r in rows] == ["completed", "failed", "completed"]
    assert "boom" in (tmp_path / "rate_0.2" / "error.txt").read_text()
    agg = read_aggregate(tmp_path / "aggregate.csv")
    assert agg[1]["status"] == "failed" and np.isnan(agg[1]["final_loss"])


def test_decoupled_seeds_and_workers(tmp_path):
    rows = sweep(toy_config(steps=20), [0.1, 0.2], tmp_path, workers=2, decouple_seeds=True)
    assert [r["status"] for r in rows] == ["completed", "completed"]
    seeds = [RunConfig.load(tmp_path / f"rate_{r}" / "config.json").training.seeds.init for r in (0.1, 0.2)]
    assert seeds == [0, 1]


def test_empty_grid(tmp_path):
    with pytest.raises(ConfigError):
        sweep(toy_config(), [], tmp_path)


def test_extreme_elr_is_recorded_not_raised(tmp_path):
    cfg = tiny_net_config(tmp_path, epochs=220, elr=1e5)
    out = run(cfg)
    assert out.summary["regime"] == R3


def test_fine_tune_same_rate_is_bit_exact(tmp_path):
    full = run(tiny_net_config(tmp_path / "full", epochs=6))
    run(tiny_net_config(tmp_path / "half", epochs=3))
    ft = fine_tune(tmp_path / "half" / "checkpoint.npz", 0.01, 3, tmp_path / "ft")
    a = (tmp_path / "full" / "trajectory.csv").read_text().splitlines()
    b = (tmp_path / "half" / "trajectory.csv").read_text().splitlines()
    c = (tmp_path / "ft" / "trajectory.csv").read_text().splitlines()
    assert a == b + c[1:]
    assert ft.summary["kind"] == "fine-tune" and ft.summary["parent"]["epoch"] == 3
    assert np.array_equal(ft.result.state.theta, full.result.state.theta)


def test_fine_tune_new_rate_and_layout_mismatch(tmp_path):
    run(tiny_net_config(tmp_path / "p", epochs=2))
    ft = fine_tune(tmp_path / "p" / "checkpoint.npz", 0.001, 2, tmp_path / "lo")
    assert RunConfig.load(tmp_path / "lo" / "config.json").optimizer.elr == 0.001
    other = dataclasses.replace(tiny_net_config(tmp_path / "x"),
                                objective=ObjectiveConfig(mlp=MlpConfig(hidden_dims=(8, 6)),
                                                          dataset=DatasetConfig(samples_per_class=20, input_dim=6)))
    with pytest.raises(IncompatibleCheckpointError):
        fine_tune(tmp_path / "p" / "checkpoint.npz", 0.01, 1, tmp_path / "bad", config=other)
    assert ft.summary["parent"]["parent_rate"] == 0.01


def test_cli_run_classify_and_errors(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    toy_config(elr=0.1, steps=3000, output_dir=str(tmp_path / "r")).save(cfg_path)
    assert main(["run", "--config", str(cfg_path)]) == 0
    assert main(["classify", str(tmp_path / "r" / "trajectory.csv")]) == 0
    out = capsys.readouterr().out
    assert json.loads(out[out.rindex("{\n  \"evidence\""):])["regime"] == R1
    assert main(["sweep", "--config", str(cfg_path), "--grid", " , "]) == 2
    bad = json.loads(cfg_path.read_text())
    bad["training"]["epochz"] = 1
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["run", "--config", str(tmp_path / "bad.json")]) == 2
    assert "training.epochz" in capsys.readouterr().err


def test_cli_seed_override_and_fine_tune(tmp_path):
    cfg_path = tmp_path / "c.json"
    tiny_net_config(tmp_path / "a", epochs=2).save(cfg_path)
    assert main(["run", "--config", str(cfg_path), "--seed-batch", "9", "--output-dir", str(tmp_path / "b")]) == 0
    assert RunConfig.load(tmp_path / "b" / "config.json").training.seeds.batch == 9
    assert main(["fine-tune", "--checkpoint", str(tmp_path / "b" / "checkpoint.npz"), "--rate", "0.02",
                 "--epochs", "1", "--output-dir", str(tmp_path / "ft")]) == 0
    assert main(["probe", "invariance-audit", str(tmp_path / "b" / "checkpoint.npz"),
                 "--output-dir", str(tmp_path / "audit")]) == 0


def test_cli_diverged_exit_status(tmp_path, monkeypatch):
    cfg_path = tmp_path / "c.json"
    toy_config(steps=5, output_dir=str(tmp_path / "r")).save(cfg_path)
    real = runner.train

    def exploding(*args, **kwargs):
        res = real(*args, **kwargs)
        res.diverged = True
        return res

    monkeypatch.setattr(runner, "train", exploding)
    assert main(["run", "--config", str(cfg_path)]) == 1
