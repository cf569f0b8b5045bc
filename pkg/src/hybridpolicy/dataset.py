"""Expert demonstration files and the flattened training view.

File layout (all little-endian)::

    magic        4 bytes   b"HPDS"
    version      u8        1
    dims         u16
    num_targets  u16
    seed         u64
    config_hash  16 bytes  ASCII, NUL padded
    n_episodes   u32
    then per episode:
        task_id  u16
        success  u8
        length   u32       number of actions T
        targets  f64[num_targets * dims]
        positions f64[(T + 1) * dims]
        actions  f64[T * dims]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import toy_env
from .hybrid_action import QuantizerConfig, quantize
from .nn_core import spawn_rngs

MAGIC = b"HPDS"
VERSION = 1
_HEADER = struct.Struct("<4sBHHQ16sI")
_EP_HEADER = struct.Struct("<HBI")


class DatasetFormatError(ValueError):
    pass


def generate_episodes(seed: int, n_episodes: int, num_targets: int = 4, dims: int = 2,
                      noise: float = toy_env.EXPERT_NOISE) -> list[toy_env.Trajectory]:
    episodes = []
    for rng in spawn_rngs(seed, n_episodes):
        env_seed = int(rng.integers(2 ** 62))
        task = int(rng.integers(num_targets))
        state = toy_env.reset(env_seed, num_targets, task, dims)
        episodes.append(toy_env.rollout_expert(state, rng, noise))
    return episodes


def write_dataset(path, episodes, seed: int, config_hash: str = ""):
    if not episodes:
        raise ValueError("refusing to write an empty dataset")
    G, D = episodes[0].targets.shape
    chunks = [_HEADER.pack(MAGIC, VERSION, D, G, seed & (2 ** 64 - 1),
                           config_hash.encode("ascii")[:16], len(episodes))]
    for ep in episodes:
        chunks.append(_EP_HEADER.pack(ep.task_id, int(ep.success), len(ep)))
        chunks.append(np.ascontiguousarray(ep.targets, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(ep.positions, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(ep.actions, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


@dataclass
class DatasetFile:
    episodes: list
    seed: int
    config_hash: str
    dims: int
    num_targets: int


def read_dataset(path) -> DatasetFile:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: file too short for a dataset header")
    magic, version, D, G, seed, chash, n = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    episodes = []
    try:
        for _ in range(n):
            task, success, T = _EP_HEADER.unpack_from(raw, off)
            off += _EP_HEADER.size
            arrs = []
            for count in (G * D, (T + 1) * D, T * D):
                end = off + 8 * count
                if end > len(raw):
                    raise DatasetFormatError(f"{path}: truncated episode data")
                arrs.append(np.frombuffer(raw[off:end], dtype="<f8").astype(float))
                off = end
            episodes.append(toy_env.Trajectory(arrs[0].reshape(G, D), task,
                                               arrs[1].reshape(T + 1, D),
                                               arrs[2].reshape(T, D), bool(success)))
    except struct.error as exc:
        raise DatasetFormatError(f"{path}: truncated episode header: {exc}") from None
    if off != len(raw):
        raise DatasetFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return DatasetFile(episodes, seed, chash.rstrip(b"\0").decode("ascii"), D, G)


def future_actions(actions: np.ndarray, t: int, length: int) -> np.ndarray:
    """Actions t .. t+length-1, padding past the end with the last action."""
    idx = np.minimum(np.arange(t, t + length), len(actions) - 1)
    return actions[idx]


def continuation(ep: toy_env.Trajectory, length: int) -> np.ndarray:
    """Noise-free expert actions for ``length`` steps after the episode's last state."""
    state = ep.state(len(ep))
    out = []
    for _ in range(length):
        a = toy_env.expert_action(state, None)
        state, _, _ = toy_env.step(state, a)
        out.append(a)
    return np.array(out).reshape(length, ep.targets.shape[1])


class TrainingSet:
    """Every (episode, timestep) pair flattened into aligned arrays.

    ``plan_future`` holds the next ``horizon`` actions with the last action
    repeated past the end of the episode (the planner's labels).
    ``future`` holds the same actions but continues past the end with the
    noise-free expert holding position, which is what the refiner regresses:
    repeating a terminal approach step would teach it to overshoot.
    """

    def __init__(self, episodes, horizon: int):
        p_obs, r_obs, plan, fut = [], [], [], []
        for ep in episodes:
            if len(ep) == 0:
                continue
            extended = np.concatenate([ep.actions, continuation(ep, horizon)])
            for t in range(len(ep)):
                st = ep.state(t)
                p_obs.append(toy_env.observe(st, "planner"))
                r_obs.append(toy_env.observe(st, "refiner"))
                plan.append(future_actions(ep.actions, t, horizon))
                fut.append(extended[t:t + horizon])
        self.planner_obs = np.array(p_obs)
        self.refiner_obs = np.array(r_obs)
        self.plan_future = np.array(plan)    # [S, horizon, D]
        self.future = np.array(fut)          # [S, horizon, D]
        self.horizon = horizon

    def __len__(self):
        return self.future.shape[0]

    def coarse_targets(self, num_bins: int) -> np.ndarray:
        return quantize(self.plan_future, QuantizerConfig(num_bins, self.future.shape[-1]))

    def batch(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.integers(0, len(self), size)
