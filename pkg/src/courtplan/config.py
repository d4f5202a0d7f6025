"""
Run configuration: nested dataclasses loaded from YAML/JSON with unknown keys rejected.

Training defaults are the full-scale values (lr 2e-5, batch 512,
245K steps, 20 diffusion steps); desk-scale runs override them in a config
file or with flags.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .diffusion import FULL_SCALE_BATCH, FULL_SCALE_LR, FULL_SCALE_N_STEPS, FULL_SCALE_TRAIN_STEPS


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    motion: list[str] = field(default_factory=list)
    pbp: list[str] = field(default_factory=list)
    dataset: str = ""


@dataclass
class ModelSection:
    horizon: int = 64
    n_steps: int = FULL_SCALE_N_STEPS
    base_width: int = 32
    dim_mults: list[int] = field(default_factory=lambda: [1, 2, 4])
    kernel_size: int = 5
    schedule: str = "cosine"


@dataclass
class TrainSection:
    lr: float = FULL_SCALE_LR
    batch_size: int = FULL_SCALE_BATCH
    steps: int = FULL_SCALE_TRAIN_STEPS
    seed: int = 0
    log_every: int = 100


@dataclass
class PlanSection:
    alpha: float = 0.1
    batch: int = 8
    seed: int = 0
    grad_clip: float = 100.0
    example: int = 0


@dataclass
class AdversarySection:
    policy: str = "man_to_man"
    m: int = 25
    total_len: int = 64
    max_speed_ftps: float = 26.0


@dataclass
class EvalSection:
    n_runs: int = 5
    alphas: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.1, 1.0, 10.0])
    n_states: int = 32
    seed: int = 0
    random_walk_std_ft: float = 0.3


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    plan: PlanSection = field(default_factory=PlanSection)
    adversary: AdversarySection = field(default_factory=AdversarySection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(section_cls, name: str, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(section_cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
    obj = section_cls()
    for key, value in raw.items():
        default = getattr(obj, key)
        if isinstance(default, (int, float)) and not isinstance(default, bool) and isinstance(value, str):
            # yaml 1.1 reads "1e-3" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(default, bool) or default is None:
            setattr(obj, key, value)
        elif isinstance(default, int) and not isinstance(value, bool) and isinstance(value, (int, float)) and float(value).is_integer():
            setattr(obj, key, int(value))
        elif isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
            setattr(obj, key, float(value))
        elif isinstance(default, type(value)):
            setattr(obj, key, value)
        else:
            raise ConfigError(f"config key {name}.{key} expects {type(default).__name__}, got {value!r}")
    return obj


def from_dict(raw: Optional[dict]) -> RunConfig:
    raw = raw or {}
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in sections:
            raise ConfigError(f"unknown config key {key}")
    cfg = RunConfig()
    for name, f in sections.items():
        if name in raw:
            setattr(cfg, name, _coerce(type(getattr(cfg, name)), name, raw[name]))
    return cfg


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(raw)


def override(cfg: RunConfig, section: str, **values: Any) -> RunConfig:
    """Apply flag values that were actually given (not None)."""
    sec = getattr(cfg, section)
    for key, value in values.items():
        if value is not None:
            setattr(sec, key, value)
    return cfg
