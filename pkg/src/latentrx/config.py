"""Run configuration: one YAML file plus dotted command-line overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .evalkit import BehaviorConfig
from .policy import PolicyConfig
from .rewards import RewardConfig
from .synthicu import SimConfig
from .worldmodel import WorldModelConfig

OUTPUT_ENV = "LATENTRX_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 10000
    n_test: int = 2000
    seed: int = 0


@dataclass
class EvalConfig:
    n_true: int = 5000
    true_seed: int = 777
    clip_low: float = 1e-4
    clip_high: float = 1e2
    bins: int = 10
    act_mode: str = "greedy"


@dataclass
class RunConfig:
    schema: str = "sepsis"
    seed: int = 0
    precision: str = "float32"
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    sim: dict = field(default_factory=dict)  # SimConfig overrides; unset fields keep schema defaults
    reward: RewardConfig = field(default_factory=RewardConfig)
    world: WorldModelConfig = field(default_factory=WorldModelConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if self.schema not in ("sepsis", "vent"):
            raise ConfigError(f"unknown schema {self.schema!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        p = self.policy
        if not 0 <= p.tau < p.batch_length:
            raise ConfigError(f"tau={p.tau} must satisfy 0 <= tau < T={p.batch_length}")
        unknown = set(self.sim) - {f.name for f in fields(SimConfig)}
        if unknown:
            raise ConfigError(f"unknown sim keys: {sorted(unknown)}")

    def sim_config(self) -> SimConfig:
        return SimConfig(**{**self.sim, "schema": self.schema})

    def world_config(self, D: int, A: int) -> WorldModelConfig:
        return WorldModelConfig(**{**asdict(self.world), "D": D, "A": A})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reward"] = asdict(self.reward)
        return d

    def resolved(self) -> dict:
        """Every semantically relevant value, with simulator defaults expanded."""
        d = self.to_dict()
        d.pop("output_dir")
        d["sim"] = self.sim_config().to_dict()
        return d

    @property
    def hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def output_root(self) -> Path:
        base = Path(self.output_dir)
        env = os.environ.get(OUTPUT_ENV)
        if env and not base.is_absolute():
            base = Path(env) / base
        return base


_SECTIONS = {
    "data": DataConfig,
    "reward": RewardConfig,
    "world": WorldModelConfig,
    "policy": PolicyConfig,
    "behavior": BehaviorConfig,
    "evaluate": EvalConfig,
}


def _coerce(value: str) -> Any:
    return yaml.safe_load(value)


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        key = f"{path}{k}"
        if k not in out and not path.startswith("sim."):
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def from_dict(d: dict) -> RunConfig:
    defaults = RunConfig().to_dict()
    merged = _merge(defaults, d)
    kwargs = {k: v for k, v in merged.items() if k not in _SECTIONS}
    try:
        for name, cls in _SECTIONS.items():
            kwargs[name] = cls(**merged[name])
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_overrides(items: list[str]) -> dict:
    """``["a.b=1", "c=x"]`` -> nested dict with YAML-typed values."""
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _coerce(value)
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    d: dict = {}
    if path is not None:
        with open(path) as f:
            d = yaml.safe_load(f) or {}
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if overrides:
        d = _merge_raw(d, parse_overrides(overrides))
    return from_dict(d)


def _merge_raw(a: dict, b: dict) -> dict:
    out = copy.deepcopy(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge_raw(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
