"""Experiment configuration: one JSON document addressing every module knob.

Unknown keys are rejected (typos should fail loudly), and the canonical JSON
serialization hashes to a stable id that gets stamped into every output
artifact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

from .evaluation import ProbeConfig
from .inversion import InversionConfig
from .trainer import TrainConfig
from .viewgen import PerturbConfig, WSearchConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    classes: int = 4
    train_per_class: int = 500
    test_per_class: int = 100
    resolution: int = 32
    channels: int = 3
    prototype_scale: float = 1.2
    latent_jitter: float = 0.35


@dataclass
class ModelConfig:
    embed_dim: int = 32
    latent_dim: int = 12
    style_dim: int = 8
    encoder_channels: tuple = (8, 16, 32)
    dtype: str = "float64"

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")


@dataclass
class ViewgenConfig:
    mode: str = "w_perturb"
    wsearch: WSearchConfig = field(default_factory=WSearchConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    encoder_run: str = "baseline"
    calibrate_epsilons: bool = False

    def __post_init__(self):
        if self.mode not in ("w_search", "w_perturb"):
            raise ConfigError(f"viewgen mode must be w_search or w_perturb, got {self.mode!r}")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    viewgen: ViewgenConfig = field(default_factory=ViewgenConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: ProbeConfig = field(default_factory=ProbeConfig)
    seed: int = 0
    output_dir: str = "lv_output"


def _from_dict(cls, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{path or cls.__name__}' must be an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in section '{path or 'config'}'")
    kwargs = {}
    for name, value in data.items():
        hint = hints.get(name)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            kwargs[name] = _from_dict(hint, value, f"{path}.{name}" if path else name)
        elif hint in (tuple, typing.Tuple) or (isinstance(value, list) and hint is tuple):
            kwargs[name] = tuple(value)
        elif isinstance(value, list) and str(hint).startswith("tuple"):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid section '{path or 'config'}': {exc}") from exc


def _to_jsonable(obj, path: str = ""):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name), f"{path}.{f.name}")
                for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_jsonable(v, path) for v in obj]
    if callable(obj):
        raise ConfigError(f"field '{path}' holds a callable and cannot be serialized")
    return obj


def config_from_dict(data: dict) -> ExperimentConfig:
    return _from_dict(ExperimentConfig, data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _to_jsonable(cfg)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, sort_keys=True, indent=2)
        fh.write("\n")


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable id of the experiment parameters (output location excluded, so
    the same experiment hashes identically wherever it is stored)."""
    data = config_to_dict(cfg)
    data.pop("output_dir", None)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def set_by_path(data: dict, dotted: str, value) -> None:
    """Assign into a nested config dict via 'section.sub.key' paths."""
    parts = dotted.split(".")
    cur = data
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            raise ConfigError(f"no section {p!r} while resolving {dotted!r}")
        cur = cur[p]
    if parts[-1] not in cur:
        raise ConfigError(f"no parameter {parts[-1]!r} while resolving {dotted!r}")
    cur[parts[-1]] = value
