import json

import pytest
from hypothesis import given, settings, strategies as st

from sphere_regimes.config import (ConfigError, DatasetConfig, MlpConfig, ObjectiveConfig, OptimizerSection,
                                   RunConfig, ScheduleConfig, Seeds, TrainingConfig, parse_grid, toy_config)

seeds = st.builds(Seeds, init=st.integers(0, 10 ** 6), data=st.integers(0, 10 ** 6),
                  batch=st.integers(0, 10 ** 6), optimizer=st.integers(0, 10 ** 6))
finite = st.floats(1e-6, 1e3, allow_nan=False)


@st.composite
def configs(draw):
    kind = draw(st.sampled_from(["toy", "si-mlp"]))
    objective = ObjectiveConfig(
        kind=kind,
        alphas=tuple(draw(st.lists(finite, min_size=1, max_size=4))),
        mlp=MlpConfig(hidden_dims=tuple(draw(st.lists(st.integers(1, 64), min_size=1, max_size=3))),
                      bn_epsilon=draw(st.floats(1e-16, 1e-3)), last_layer_norm=draw(finite)),
        dataset=DatasetConfig(num_classes=draw(st.integers(2, 10)), samples_per_class=draw(st.integers(5, 500)),
                              separation=draw(finite)),
        label_noise=draw(st.floats(0.0, 1.0)))
    mode = draw(st.sampled_from(["projected-sphere", "whole-space-wd", "random-walk"]))
    rate = draw(finite)
    opt = {"projected-sphere": OptimizerSection(elr=rate),
           "whole-space-wd": OptimizerSection(mode="whole-space-wd", elr=None, lr=rate, weight_decay=draw(st.floats(0.0, 1.0))),
           "random-walk": OptimizerSection(mode="random-walk", elr=None, step_size=rate)}[mode]
    if draw(st.booleans()):
        opt = OptimizerSection(**{**opt.__dict__, "schedule": ScheduleConfig("cosine", t_max=draw(st.integers(1, 99)))})
    training = TrainingConfig(epochs=draw(st.integers(0, 10 ** 5)), batch_size=draw(st.integers(2, 512)),
                              log_every=draw(st.one_of(st.none(), st.integers(1, 100))), seeds=draw(seeds))
    return RunConfig(objective, opt, training, output_dir=draw(st.text(min_size=1, max_size=20)))


@settings(max_examples=100, deadline=None)
@given(cfg=configs())
def test_round_trip(cfg):
    again = RunConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_defaults_are_the_desk_network():
    cfg = RunConfig()
    assert cfg.objective.kind == "si-mlp" and cfg.log_every == 1
    assert cfg.mlp_spec().hidden_dims == (64, 32) and cfg.mlp_spec().input_dim == 20
    assert toy_config().log_every == 10
    assert cfg.with_rate(0.5).optimizer.elr == 0.5


def test_unknown_key_names_its_path():
    data = RunConfig().to_dict()
    data["optimizer"]["schedule"]["t_maxx"] = 3
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict(data)
    assert err.value.path == "optimizer.schedule.t_maxx"


@pytest.mark.parametrize("path,value", [
    ("training.epochs", "ten"), ("training.epochs", 1.5), ("training.epochs", True),
    ("objective.alphas", 3), ("objective.mlp.hidden_dims", [1, "x"]), ("output_dir", 5),
])
def test_type_errors_name_their_path(path, value):
    data = RunConfig().to_dict()
    node = data
    *parents, leaf = path.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict(data)
    assert err.value.path.startswith(path)


@pytest.mark.parametrize("mutate,path", [
    (lambda d: d.update(version=2), "version"),
    (lambda d: d["objective"].update(kind="cnn"), "objective.kind"),
    (lambda d: d["objective"].update(label_noise=1.5), "objective.label_noise"),
    (lambda d: d["training"].update(batch_size=1), "training.batch_size"),
    (lambda d: d["training"].update(log_every=0), "training.log_every"),
    (lambda d: d["optimizer"].update(lr=0.1), "optimizer"),
    (lambda d: d["optimizer"].update(elr=None), "optimizer"),
    (lambda d: d["objective"]["dataset"].update(kind="idx"), "objective.dataset.train_images"),
])
def test_semantic_errors(mutate, path):
    data = RunConfig().to_dict()
    mutate(data)
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict(data)
    assert err.value.path == path


def test_bad_json_and_non_object():
    with pytest.raises(ConfigError):
        RunConfig.from_json("{not json")
    with pytest.raises(ConfigError):
        RunConfig.from_dict([1, 2])


def test_save_load(tmp_path):
    cfg = toy_config(elr=0.3)
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg
    assert json.loads((tmp_path / "c.json").read_text())["version"] == 1


def test_decade_grid():
    assert parse_grid("paper-grid(0,1)") == [0.1, 0.2, 0.5, 1.0, 2.0, 5.0]
    assert len(parse_grid("paper-grid(0,5)")) == 18
    assert parse_grid("0.5, 0.1,0.5") == [0.1, 0.5]
    for bad in ("", " , ", "paper-grid(3,1)", "a,b", "-1"):
        with pytest.raises(ConfigError):
            parse_grid(bad)
