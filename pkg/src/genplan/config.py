"""One YAML config shared by every CLI subcommand.

Parsing is strict: unknown keys are an error naming the offending dotted key,
and scalar types must match the dataclass field. The fully resolved config
(defaults applied) is echoed next to generated artifacts, and its SHA-256
digest is embedded in model / cache headers and CSV comment lines so that
mismatched artifact pairs are detectable after the fact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, is_dataclass
from pathlib import Path

import yaml

from .experiments import CuldesacConfig, RandomWorldConfig, ScenarioConfig
from .flow import TrainConfig
from .maskcache import AtomicGrid
from .mppi import MppiConfig
from .planner import PlanConfig
from .vehicle import PidGains

TOOL_VERSION = "genplan 0.1.0"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    dataset: str = "artifacts/expert.csv"
    model: str = "artifacts/flow.gpnf"
    cache: str = "artifacts/mask.gpmc"
    out_dir: str = "artifacts"


@dataclass(frozen=True)
class ExpertConfig:
    n: int = 836
    noise_std: float = 0.005


@dataclass(frozen=True)
class CacheBuildConfig:
    k: int = 12
    ds: float = 0.01
    n_workers: int = 1
    roi: AtomicGrid = field(default_factory=AtomicGrid)


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cache: CacheBuildConfig = field(default_factory=CacheBuildConfig)
    planner: PlanConfig = field(default_factory=PlanConfig)
    mppi: MppiConfig = field(default_factory=MppiConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    gains: PidGains = field(default_factory=PidGains)

    def validate(self) -> None:
        try:
            self.train.validate()
            self.planner.validate()
            self.mppi.validate()
        except ValueError as e:
            # sub-configs raise plain ValueError; the CLI maps ConfigError to exit 2
            raise ConfigError(str(e)) from None
        if self.scenario.kind not in ("random", "culdesac"):
            raise ConfigError(f"scenario.kind must be random or culdesac, got {self.scenario.kind!r}")
        if self.cache.k < 2:
            raise ConfigError(f"cache.k must be at least 2, got {self.cache.k}")
        if self.expert.n <= 0 or self.expert.noise_std < 0:
            raise ConfigError("expert.n must be positive and expert.noise_std nonnegative")
        if self.scenario.n_trials <= 0:
            raise ConfigError("scenario.n_trials must be positive")


def _coerce(value, ftype, key: str):
    if is_dataclass(ftype):
        if not isinstance(value, dict):
            raise ConfigError(f"config key {key} must be a mapping")
        return _build(ftype, value, key)
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key} must be a boolean, got {value!r}")
        return value
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key} must be an integer, got {value!r}")
        return value
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key} must be a number, got {value!r}")
        return float(value)
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {key} must be a string, got {value!r}")
        return value
    if ftype is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {key} must be a list, got {value!r}")
        return tuple(
            _coerce(v, float, f"{key}[{i}]") for i, v in enumerate(value)
        )
    raise ConfigError(f"config key {key} has unsupported type {ftype}")


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    known = {f.name: hints[f.name] for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else str(key)
        if key not in known:
            raise ConfigError(f"unknown config key: {dotted}")
        kwargs[key] = _coerce(value, known[key], dotted)
    return cls(**kwargs)


def load_config(path) -> PipelineConfig:
    """Strict YAML parse; an empty or absent document yields all defaults."""
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    cfg = _build(PipelineConfig, data)
    cfg.validate()
    return cfg


def resolved_dict(cfg: PipelineConfig) -> dict:
    def plain(obj):
        if is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj

    return plain(cfg)


def config_hash(cfg: PipelineConfig) -> bytes:
    """32-byte digest of the canonical resolved form; order-insensitive."""
    canon = json.dumps(resolved_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).digest()


def resolved_yaml(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(resolved_dict(cfg), sort_keys=True)


def echo_resolved(cfg: PipelineConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / "resolved_config.yaml"
    p.write_text(resolved_yaml(cfg))
    return p
