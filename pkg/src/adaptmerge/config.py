"""Experiment configuration: nested dataclasses read from flat ``dotted.key = value`` text.

Unknown keys are errors. ``to_text`` writes every key, so an echoed config
reproduces the run exactly.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .data import DatasetConfig

METHODS = ("merged-adapters", "finetune-baseline", "replay-baseline")
ORDERS = ("AT-MER-FT-unified", "AT-MER-FT-tsh", "AT-FT-MER")
BACKBONE_INITS = ("pretrain-split", "first-task", "random-frozen")
ADAPTER_INITS = ("warm-start", "scratch")


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 10
    batch_size: int = 32
    milestones: list = field(default_factory=list)
    gamma: float = 0.1


@dataclass
class OptimizerSet:
    adapter: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(kind="sgd", lr=0.05, epochs=15))
    head: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        kind="adam", lr=1e-3, weight_decay=0.0, epochs=100, milestones=[55, 80]))
    baseline: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(kind="sgd", lr=0.05, epochs=15))
    pretrain: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(kind="sgd", lr=0.05, epochs=8))


@dataclass
class ModelConfig:
    channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    adapter_ratio: int = 4
    backbone_init: str = "pretrain-split"
    adapter_init: str = "warm-start"


@dataclass
class PretrainConfig:
    source: str = "letters"        # letters | split
    classes: list = field(default_factory=list)
    seed: int = 0
    max_per_class: int = 0


@dataclass
class ReplayConfig:
    budget: int = 40
    ratio: float = 0.25


@dataclass
class SyntheticConfig:
    num_classes: int = 4
    per_class: int = 100
    test_per_class: int = 100
    sigma: float = 0.0
    seed: int = 0
    pattern_grid: int = 0          # 0: independent pixels; g: constant over an g x g grid of squares


@dataclass
class ExperimentConfig:
    method: str = "merged-adapters"
    order: str = "AT-MER-FT-unified"
    seed: int = 0
    eval_batch_size: int = 256
    data: DatasetConfig = field(default_factory=DatasetConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    optimizer: OptimizerSet = field(default_factory=OptimizerSet)

    @property
    def head_mode(self) -> str:
        return "unified" if self.order == "AT-MER-FT-unified" else "task-specific"

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.model.backbone_init not in BACKBONE_INITS:
            raise ConfigError(f"model.backbone_init must be one of {BACKBONE_INITS}")
        if self.model.adapter_init not in ADAPTER_INITS:
            raise ConfigError(f"model.adapter_init must be one of {ADAPTER_INITS}")
        if self.data.source not in ("digits", "idx", "synthetic"):
            raise ConfigError("data.source must be digits, idx or synthetic")
        if self.data.normalization != "unit":
            raise ConfigError("data.normalization supports only unit (pixels scaled to [0, 1])")
        if self.pretrain.source not in ("letters", "split"):
            raise ConfigError("pretrain.source must be letters or split")
        for name in ("adapter", "head", "baseline", "pretrain"):
            o = getattr(self.optimizer, name)
            if o.kind not in ("sgd", "adam"):
                raise ConfigError(f"optimizer.{name}.kind must be sgd or adam")
            if o.lr <= 0 or o.batch_size < 1 or o.epochs < 0:
                raise ConfigError(f"optimizer.{name}: lr and batch_size must be positive, epochs >= 0")
            if not 0 <= o.momentum < 1 or o.weight_decay < 0:
                raise ConfigError(f"optimizer.{name}: momentum must lie in [0,1), weight_decay >= 0")
            if any(m >= o.epochs for m in o.milestones) and o.epochs:
                raise ConfigError(f"optimizer.{name}.milestones must be below epochs ({o.epochs})")
        if self.replay.budget < 1 or not 0 <= self.replay.ratio < 1:
            raise ConfigError("replay.budget must be positive and replay.ratio in [0, 1)")
        if self.model.adapter_ratio < 1 or any(c % self.model.adapter_ratio for c in self.model.channels):
            raise ConfigError("model.adapter_ratio must divide every backbone channel count")
        return self


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _coerce(raw: str, typ, key: str):
    try:
        if typ is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is list:
            return [int(v) for v in raw.replace(" ", "").split(",") if v]
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def set_key(cfg: ExperimentConfig, key: str, raw: str):
    obj, parts = cfg, key.split(".")
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or part not in _hints(type(obj)):
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    hints = _hints(type(obj)) if dataclasses.is_dataclass(obj) else {}
    if leaf not in hints or dataclasses.is_dataclass(hints[leaf]):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, leaf, _coerce(raw.strip(), hints[leaf], key))


def parse_config(text: str, origin: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            set_key(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def shipped_config(name: str) -> Path:
    return Path(str(resources.files("adaptmerge") / "configs" / f"{name}.cfg"))


def _flatten(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, key + ".")
        elif isinstance(value, list):
            yield key, ",".join(str(v) for v in value)
        else:
            yield key, str(value)


def to_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in _flatten(cfg))


def to_dict(cfg: ExperimentConfig) -> dict:
    return dict(_flatten(cfg))
