"""Run configuration: a versioned JSON document with strict parsing.

Unknown keys and wrong types are errors that name the offending field path,
e.g. ``optimizer.schedule.t_max``.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .net import SiMlpSpec
from .optim import OptimizerConfig, Schedule

CONFIG_VERSION = 1
OBJECTIVES = ("toy", "si-mlp")
DATASETS = ("blobs", "idx")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    num_classes: int = 3
    samples_per_class: int = 200
    input_dim: int = 20
    separation: float = 2.0
    # IDX files (train images, train labels, test images, test labels)
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class MlpConfig:
    hidden_dims: tuple[int, ...] = (64, 32)
    bn_epsilon: float = 1e-14
    last_layer_norm: float = 10.0


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "si-mlp"
    alphas: tuple[float, ...] = (1.0, 2.0, 4.0)
    toy_radius: float = 1.0
    mlp: MlpConfig = MlpConfig()
    dataset: DatasetConfig = DatasetConfig()
    label_noise: float = 0.0
    label_noise_seed: int = 0


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "constant"
    t_max: int | None = None
    at: int | None = None
    new_value: float | None = None


@dataclass(frozen=True)
class OptimizerSection:
    mode: str = "projected-sphere"
    elr: float | None = 0.01
    lr: float | None = None
    weight_decay: float = 0.0
    step_size: float | None = None
    schedule: ScheduleConfig = ScheduleConfig()


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    data: int = 0
    batch: int = 1
    optimizer: int = 2


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 600
    batch_size: int = 32
    log_every: int | None = None     # default: 1 for networks, 10 for the toy
    seeds: Seeds = Seeds()


@dataclass(frozen=True)
class RunConfig:
    objective: ObjectiveConfig = ObjectiveConfig()
    optimizer: OptimizerSection = OptimizerSection()
    training: TrainingConfig = TrainingConfig()
    output_dir: str = "runs/run"
    version: int = CONFIG_VERSION

    @property
    def log_every(self) -> int:
        if self.training.log_every is not None:
            return self.training.log_every
        return 10 if self.objective.kind == "toy" else 1

    def optimizer_config(self) -> OptimizerConfig:
        o = self.optimizer
        s = o.schedule
        return OptimizerConfig(mode=o.mode, elr=o.elr, lr=o.lr, weight_decay=o.weight_decay,
                               step_size=o.step_size, seed=self.training.seeds.optimizer,
                               schedule=Schedule(s.kind, s.t_max, s.at, s.new_value))

    def mlp_spec(self) -> SiMlpSpec:
        m, d = self.objective.mlp, self.objective.dataset
        return SiMlpSpec(input_dim=d.input_dim, hidden_dims=m.hidden_dims, num_classes=d.num_classes,
                         bn_epsilon=m.bn_epsilon, last_layer_norm=m.last_layer_norm,
                         seed=self.training.seeds.init)

    @property
    def rate(self) -> float:
        return self.optimizer_config().rate

    def with_rate(self, rate: float) -> "RunConfig":
        """Copy with the swept rate replaced (ELR, LR or step size depending on the mode)."""
        key = {"projected-sphere": "elr", "whole-space-wd": "lr", "random-walk": "step_size"}[self.optimizer.mode]
        return dataclasses.replace(self, optimizer=dataclasses.replace(self.optimizer, **{key: float(rate)}))

    def with_output_dir(self, output_dir) -> "RunConfig":
        return dataclasses.replace(self, output_dir=str(output_dir))

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data) -> "RunConfig":
        cfg = _build(cls, data, "")
        _validate(cfg)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"not valid JSON ({exc})") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _join(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def _coerce(tp: str, value, path: str):
    optional = tp.endswith("| None")
    base = tp.replace("| None", "").strip()
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "may not be null")
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    m = re.fullmatch(r"tuple\[(\w+), \.\.\.\]", base)
    if m:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(_coerce(m.group(1), v, f"{path}[{i}]") for i, v in enumerate(value))
    raise TypeError(f"unsupported field type {tp}")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(_join(path, unknown[0]), "unknown key")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = _join(path, name)
        default = f.default if f.default is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _coerce(f.type, value, sub)
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> None:
    if cfg.version != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported version {cfg.version}; expected {CONFIG_VERSION}")
    obj = cfg.objective
    if obj.kind not in OBJECTIVES:
        raise ConfigError("objective.kind", f"expected one of {OBJECTIVES}")
    if obj.kind == "toy":
        if not obj.alphas or min(obj.alphas) <= 0:
            raise ConfigError("objective.alphas", "need at least one positive coefficient")
        if not obj.toy_radius > 0:
            raise ConfigError("objective.toy_radius", "must be positive")
    else:
        d = obj.dataset
        if d.kind not in DATASETS:
            raise ConfigError("objective.dataset.kind", f"expected one of {DATASETS}")
        if d.kind == "idx" and not (d.train_images and d.train_labels):
            raise ConfigError("objective.dataset.train_images", "idx datasets need image and label paths")
        if not 0.0 <= obj.label_noise <= 1.0:
            raise ConfigError("objective.label_noise", "must lie in [0, 1]")
        try:
            cfg.mlp_spec()
        except ValueError as exc:
            raise ConfigError("objective.mlp", str(exc)) from None
        if cfg.training.batch_size < 2:
            raise ConfigError("training.batch_size", "batch norm needs batches of at least 2")
    try:
        cfg.optimizer_config()
    except ValueError as exc:
        raise ConfigError("optimizer", str(exc)) from None
    if cfg.training.epochs < 0:
        raise ConfigError("training.epochs", "must be non-negative")
    if cfg.log_every < 1:
        raise ConfigError("training.log_every", "must be at least 1")


def toy_config(alphas=(1.0, 2.0, 4.0), elr: float = 0.2, steps: int = 20000, log_every: int = 10,
               seed: int = 0, output_dir: str = "runs/toy") -> RunConfig:
    return RunConfig(objective=ObjectiveConfig(kind="toy", alphas=tuple(float(a) for a in alphas)),
                     optimizer=OptimizerSection(elr=elr),
                     training=TrainingConfig(epochs=steps, batch_size=0, log_every=log_every,
                                             seeds=Seeds(init=seed)),
                     output_dir=output_dir)


def parse_grid(text: str) -> list[float]:
    """Rates from ``paper-grid(kmin,kmax)`` ({1,2,5} x 10^-k, k in [kmin, kmax]) or a comma list."""
    text = text.strip()
    m = re.fullmatch(r"paper-grid\(\s*(\d+)\s*,\s*(\d+)\s*\)", text)
    if m:
        kmin, kmax = int(m.group(1)), int(m.group(2))
        rates = [float(f"{mult}e-{k}") for k in range(kmin, kmax + 1) for mult in (1, 2, 5)]
    else:
        try:
            rates = [float(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise ConfigError("grid", f"cannot parse {text!r}") from None
    if not rates:
        raise ConfigError("grid", "rate grid is empty")
    if min(rates) <= 0:
        raise ConfigError("grid", "rates must be positive")
    return sorted(set(rates))
