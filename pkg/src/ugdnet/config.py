"""Run configuration: network + training + loss + data + metrics, as YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import SynthSpec
from .errors import ConfigurationError
from .losses import LossWeights
from .network import NetworkConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    root: Optional[str] = None
    synth: bool = False
    synth_count: int = 200
    synth_spec: SynthSpec = field(default_factory=SynthSpec)
    size: int = 224
    ratios: tuple[float, float, float] = (7, 1, 2)
    normalize: str = "bitdepth"


@dataclass
class MetricsConfig:
    spacing: tuple[float, float] = (1.0, 1.0)


@dataclass
class RunConfig:
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def apply_seed(self, seed: int) -> None:
        """Use one seed for init, data synthesis, splitting and batch order."""
        self.seed = seed
        self.network.init_seed = seed
        self.train.seed = seed
        self.data.synth_spec.seed = seed

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return _build(cls, d or {}, "")

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse config {path}: {e}") from e
        if raw is not None and not isinstance(raw, dict):
            raise ConfigurationError(f"config {path} must be a mapping at top level")
        return cls.from_dict(raw)


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"config section {prefix or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigurationError(f"unknown config key: {prefix}{unknown[0]}")
    kwargs = {}
    for name, value in d.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigurationError(f"config key {prefix}{name} must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"invalid value in section {prefix or '<root>'}: {e}") from e
