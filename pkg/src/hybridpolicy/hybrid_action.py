"""Hybrid action space: normalization, uniform coarse bins, and composition.

Actions live in the normalized box [-1, 1]^D. A coarse token is the index of
one of N equal-width bins per dimension; the fine part is a continuous vector.
All functions are pure and vectorize over leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import ConfigError

COMPOSE_MODES = ("direct", "residual")


@dataclass(frozen=True)
class NormalizationStats:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=float)
        high = np.asarray(self.high, dtype=float)
        if low.shape != high.shape:
            raise ConfigError("low/high shape mismatch")
        if np.any(low >= high):
            raise ConfigError("every low bound must be below its high bound")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)


@dataclass(frozen=True)
class QuantizerConfig:
    num_bins: int
    dims: int = 1

    def __post_init__(self):
        if self.num_bins < 2:
            raise ConfigError(f"num_bins must be >= 2, got {self.num_bins}")
        if self.dims < 1:
            raise ConfigError(f"dims must be >= 1, got {self.dims}")

    @property
    def bin_width(self) -> float:
        return 2.0 / self.num_bins


def normalize(raw, stats: NormalizationStats) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != stats.low.shape[-1]:
        raise ConfigError(f"action has {raw.shape[-1]} dims, stats have {stats.low.shape[-1]}")
    out = 2.0 * (raw - stats.low) / (stats.high - stats.low) - 1.0
    return np.clip(out, -1.0, 1.0)


def denormalize(a, stats: NormalizationStats) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return stats.low + (a + 1.0) * 0.5 * (stats.high - stats.low)


def quantize(a, cfg: QuantizerConfig) -> np.ndarray:
    """Bin index per component: clip(floor((a + 1) / 2 * N), 0, N - 1)."""
    a = np.asarray(a, dtype=float)
    idx = np.floor((a + 1.0) / 2.0 * cfg.num_bins)
    return np.clip(idx, 0, cfg.num_bins - 1).astype(np.int64)


def dequantize(tokens, cfg: QuantizerConfig) -> np.ndarray:
    """Bin centers: 2 * (index + 0.5) / N - 1."""
    t = np.asarray(tokens)
    if t.size and (t.min() < 0 or t.max() >= cfg.num_bins):
        raise ValueError(f"token out of range [0, {cfg.num_bins})")
    return 2.0 * (t + 0.5) / cfg.num_bins - 1.0


def compose(coarse, fine, mode: str, cfg: QuantizerConfig) -> np.ndarray:
    """Combine a coarse token with a fine vector into the executed action.

    ``direct`` returns the fine vector as-is. ``residual`` treats the fine
    vector as an offset inside the bin: center + fine / N, so fine = +-1
    reaches the bin edges.
    """
    fine = np.asarray(fine, dtype=float)
    if mode == "direct":
        return fine.copy()
    if mode == "residual":
        return np.clip(dequantize(coarse, cfg) + fine / cfg.num_bins, -1.0, 1.0)
    raise ConfigError(f"unknown compose mode {mode!r}; expected one of {COMPOSE_MODES}")
