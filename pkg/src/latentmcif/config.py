"""Declarative run configuration shared by every CLI stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Mapping

from .seeding import config_digest as _digest
from .seeding import derive_seed


@dataclass
class SimulateBlock:
    scale: float = 0.01
    cadence_days: float = 3.0


@dataclass
class NetworkBlock:
    latent_dim: int = 32
    recurrent_units: int = 64
    recurrent_layers: int = 2
    hidden_units: int = 64
    epochs: int = 40
    learning_rate: float = 1e-3
    batch_size: int = 32
    prefix_fraction: float = 0.5


@dataclass
class ForestBlock:
    n_estimators: int = 200
    psi: int = 256
    baseline_estimators: int = 2400


@dataclass
class PopulationBlock:
    ratio: float = 220.0
    n_resamples: int = 50
    top_fraction: float = 0.15


@dataclass
class RealtimeBlock:
    l_min: int = -30
    l_max: int = 70
    eligibility_window: float = 5.0
    max_per_group: int = 200
    prefix_draws: int = 3  # 0 scores timelines with the full-curve forests


@dataclass
class SweepBlock:
    dims: list[int] = field(default_factory=lambda: [10, 25, 50, 100])
    seeds: list[int] = field(default_factory=lambda: [0, 1])


@dataclass
class RunConfig:
    """Everything that determines a run's outputs, plus where to write them.

    ``out_dir`` and ``jobs`` do not influence results and are left out of the digest.
    """

    seed: int = 0
    n_t: int = 96
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    simulate: SimulateBlock = field(default_factory=SimulateBlock)
    network: NetworkBlock = field(default_factory=NetworkBlock)
    forest: ForestBlock = field(default_factory=ForestBlock)
    population: PopulationBlock = field(default_factory=PopulationBlock)
    realtime: RealtimeBlock = field(default_factory=RealtimeBlock)
    sweep: SweepBlock = field(default_factory=SweepBlock)
    out_dir: str = "run"
    jobs: int = 1

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = asdict(self)
        if not include_runtime:
            d.pop("out_dir")
            d.pop("jobs")
        return d

    def digest(self) -> str:
        return config_digest(self)

    def stage_seed(self, *path: Any) -> int:
        return derive_seed(self.seed, *path)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RunConfig":
        return _merge(cls(), doc)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _merge(obj, doc: Mapping):
    names = {f.name: f for f in fields(obj)}
    for key, value in doc.items():
        if key not in names:
            raise ValueError(f"unknown config key {key!r} in {type(obj).__name__}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, Mapping):
                raise ValueError(f"config key {key!r} must be an object")
            _merge(current, value)
        else:
            setattr(obj, key, value)
    return obj


def config_digest(config: RunConfig) -> str:
    """sha256 of the canonical JSON of the result-determining config fields."""
    return _digest(config.to_dict())
