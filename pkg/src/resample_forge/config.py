"""Experiment configuration: JSON files mirroring each module's knobs.

Unknown keys are rejected rather than ignored, and every CLI run writes
its fully resolved configuration next to its outputs so results are
self-describing.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from resample_forge.training import TrainConfig


def build_dataclass(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 1
    n_beacons: int = 6
    width: float = 10.0
    height: float = 10.0
    obs_noise_std: float = 0.1
    odometry_noise_std: tuple[float, float, float] = (0.1, 0.05, 0.05)


@dataclass(frozen=True)
class ModelConfig:
    latent: int = 256
    heads: int = 8
    ff: int | None = None
    enc_blocks: int = 2
    dec_blocks: int = 2


@dataclass(frozen=True)
class FilterConfig:
    particles: int = 32          # desk-scale default; 100 at full scale
    error_threshold: float = 0.5
    init_pos_std: float = 0.5
    init_heading_std: float = 0.3
    soft_alpha: float = 0.5


@dataclass(frozen=True)
class SweepConfig:
    bandwidths: tuple[float, ...] = (0.05, 0.1, 0.2, 0.5, 1.0)


_SECTIONS = {
    "world": WorldConfig,
    "model": ModelConfig,
    "filter": FilterConfig,
    "train": TrainConfig,
    "sweep": SweepConfig,
}


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            data = json.load(f)
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ValueError(f"{path}: unknown sections {sorted(unknown)}")
        sections = {}
        for name, section_cls in _SECTIONS.items():
            raw = dict(data.get(name, {}))
            for key, value in raw.items():
                if isinstance(value, list):
                    raw[key] = tuple(value)
            sections[name] = build_dataclass(section_cls, raw, f"{path}:{name}")
        return cls(**sections)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name))
                for name in _SECTIONS}


def write_resolved_config(path, config: ExperimentConfig,
                          command: str, arguments: dict) -> None:
    """Record the fully resolved settings of a run next to its outputs."""
    payload = {"command": command, "arguments": arguments,
               "config": config.to_dict()}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, default=str)
        f.write("\n")
