"""Flat ``key = value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Every key must be known; values
are parsed according to the field type. The config hash covers every setting
that shapes data or trained weights, so evaluation-only keys can change
without invalidating checkpoints.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .nn_core import ConfigError

# Keys that only affect evaluation; excluded from the hash.
EVAL_KEYS = frozenset({"eval_episodes", "eval_layout", "sample_mode", "m_factor", "dataset"})
DATA_KEYS = ("seed", "dims", "num_targets", "n_episodes", "expert_noise")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dims: int = 2
    num_targets: int = 4
    n_bins: int = 10
    h_chunk: int = 5
    m_factor: int = 2
    l_macro: int = 10
    k_diff: int = 50
    tau: float = 0.75
    ema_decay: float = 0.99
    lambda_diff: float = 1.0
    lambda_plan: float = 0.5
    strategy: str = "dynamic"
    latch: bool = True
    intent_sampling: str = "categorical"
    compose_mode: str = "direct"
    sample_mode: str = "argmax"
    planner_width: int = 64
    planner_depth: int = 2
    planner_ffn: int = 128
    refiner_width: int = 256
    refiner_depth: int = 3
    d_emb: int = 8
    geo_width: int = 64
    train_steps: int = 6000
    batch_size: int = 128
    lr: float = 1e-3
    warmup: int = 100
    weight_decay: float = 0.0
    n_episodes: int = 500
    expert_noise: float = 0.02
    eval_episodes: int = 200
    eval_layout: str = "random"
    dataset: str = ""

    def __post_init__(self):
        _validate(self)

    @property
    def horizon_rows(self) -> int:
        return self.m_factor * self.h_chunk

    def with_updates(self, **kw) -> ExperimentConfig:
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)

    def hash(self) -> str:
        return _digest({k: v for k, v in asdict(self).items() if k not in EVAL_KEYS})

    def data_hash(self) -> str:
        """Hash of the settings that determine the demonstration dataset."""
        return _digest({k: getattr(self, k) for k in DATA_KEYS})

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())


def _digest(settings: dict) -> str:
    text = "\n".join(f"{k}={_format(v)}" for k, v in sorted(settings.items()))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _validate(c: ExperimentConfig):
    positive = ("dims", "n_bins", "h_chunk", "m_factor", "l_macro", "k_diff", "planner_width",
                "planner_depth", "refiner_width", "refiner_depth", "d_emb", "geo_width",
                "batch_size", "n_episodes", "eval_episodes")
    for name in positive:
        if getattr(c, name) < 1:
            raise ConfigError(f"{name} must be positive, got {getattr(c, name)}")
    if c.n_bins < 2:
        raise ConfigError("n_bins must be at least 2")
    if c.num_targets < 2:
        raise ConfigError("num_targets must be at least 2")
    if not 0 < c.tau < 1:
        raise ConfigError("tau must lie in (0, 1)")
    if not 0 <= c.ema_decay < 1:
        raise ConfigError("ema_decay must lie in [0, 1)")
    if c.lambda_diff < 0 or c.lambda_plan < 0:
        raise ConfigError("loss weights must be non-negative")
    if c.train_steps < 0 or c.warmup < 0 or c.planner_ffn < 0:
        raise ConfigError("step counts and widths must be non-negative")
    if c.lr <= 0:
        raise ConfigError("lr must be positive")
    choices = {"strategy": ("dynamic", "pure_tf", "no_tf"),
               "intent_sampling": ("argmax", "categorical"),
               "sample_mode": ("argmax", "categorical"),
               "compose_mode": ("direct", "residual"),
               "eval_layout": ("random", "symmetric")}
    for name, allowed in choices.items():
        if getattr(c, name) not in allowed:
            raise ConfigError(f"{name} must be one of {allowed}, got {getattr(c, name)!r}")


def _parse_value(name: str, raw: str, kind):
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, types[key])
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    return parse_config(p.read_text(), str(p))
