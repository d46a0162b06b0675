"""Experiment configuration: strict JSON schema, dot-path overrides, hashing."""

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from advdepth.adversarial import GanVariant
from advdepth.data import SyntheticSpec
from advdepth.losses import LossWeights
from advdepth.model import ConfigError, GeneratorConfig


@dataclass
class SchedulerConfig:
    factor: float = 0.5
    patience: int = 3


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    max_steps: typing.Optional[int] = None
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    seed: int = 0
    restarts: int = 1
    deterministic: bool = True
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.restarts < 1:
            raise ConfigError("train.restarts must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if not 0 < self.scheduler.factor < 1:
            raise ConfigError("train.scheduler.factor must be in (0, 1)")


@dataclass
class SyntheticDataConfig:
    scene: SyntheticSpec = field(default_factory=SyntheticSpec)
    num_train: int = 500
    num_val: int = 50
    num_test: int = 50
    seed: int = 1234


@dataclass
class DataConfig:
    kind: str = "kitti"
    root: typing.Optional[str] = None
    height: int = 256
    width: int = 512
    augment: bool = True
    synthetic: SyntheticDataConfig = field(default_factory=SyntheticDataConfig)

    def __post_init__(self):
        if self.kind not in ("kitti", "cityscapes", "synthetic"):
            raise ConfigError(f"data.kind must be kitti, cityscapes or synthetic, got {self.kind!r}")
        if self.kind != "synthetic" and not self.root:
            raise ConfigError(f"data.root is required for data.kind={self.kind}")


@dataclass
class EvalConfig:
    cap: float = 80.0
    floor: float = 1e-3
    crop: str = "garg"
    flip_merge: bool = True

    def __post_init__(self):
        if self.crop not in ("garg", "none"):
            raise ConfigError(f"eval.crop must be 'garg' or 'none', got {self.crop!r}")
        if not self.cap > self.floor > 0:
            raise ConfigError("eval.cap > eval.floor > 0 required")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    gan: GanVariant = field(default_factory=GanVariant)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _build(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key {where}{unknown[0]}")
    kwargs = {}
    for key, value in raw.items():
        kind = hints[key]
        sub = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(kind):
            kwargs[key] = _build(kind, value, sub)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def from_dict(raw):
    return _build(ExperimentConfig, raw, "")


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def to_dict(config):
    return _plain(config)


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _schema(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: _schema(hints[f.name]) if dataclasses.is_dataclass(hints[f.name]) else None
            for f in dataclasses.fields(cls)}


def apply_overrides(raw, overrides):
    """Set dot-path keys in a raw config dict; each path must already exist in the schema."""
    raw = copy.deepcopy(raw)
    schema = _schema(ExperimentConfig)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        parts = key.split(".")
        node, ref = raw, schema
        for i, part in enumerate(parts):
            if not isinstance(ref, dict) or part not in ref:
                raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])}")
            ref = ref[part]
            if i == len(parts) - 1:
                node[part] = value
            else:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"{'.'.join(parts[:i + 1])} is not an object")
    return raw


def load_config(path, overrides=()):
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(apply_overrides(raw, overrides))


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def config_hash(config):
    """Hash of everything that defines the experiment except its name and seeding."""
    d = to_dict(config)
    d.pop("name", None)
    d["train"].pop("seed", None)
    d["train"].pop("restarts", None)
    return _digest(d)


def arch_hash(generator_config):
    return _digest(to_dict(generator_config))


def with_seed(config, seed):
    new = copy.deepcopy(config)
    new.train.seed = seed
    return new
