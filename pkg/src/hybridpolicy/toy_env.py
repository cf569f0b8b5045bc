"""Reach-and-align toy environment with a scripted expert.

The agent moves in the box [-1, 1]^D. Several targets are placed with a
minimum separation; ``task_id`` picks the one that counts. An episode
succeeds once the agent is within ``EPS_FINE`` (max-norm) of the true target.

Two observation channels are exposed. The planner channel sees positions
snapped to a coarse grid plus the one-hot task id; the refiner channel sees
exact positions but not the task id, so it cannot tell targets apart on its
own.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .hybrid_action import QuantizerConfig, dequantize, quantize
from .nn_core import make_rng

STEP_SCALE = 0.05          # workspace units moved per unit action
EPS_FINE = 0.01            # success tolerance, max-norm
HORIZON = 200              # step cap per episode
MIN_SEPARATION = 0.5       # between targets, Euclidean
MIN_START_DISTANCE = 0.3   # agent start to any target, Euclidean
TARGET_BOX = 0.9
START_JITTER = 0.05
OBS_GRID = 20              # planner channel cells per dimension
EXPERT_GAIN = 0.5
EXPERT_NOISE = 0.02
MAX_PLACEMENT_TRIES = 1000
CHANNELS = ("planner", "refiner")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvState:
    agent_pos: np.ndarray
    targets: np.ndarray
    task_id: int
    step_count: int = 0

    @property
    def dims(self) -> int:
        return self.agent_pos.shape[0]

    @property
    def num_targets(self) -> int:
        return self.targets.shape[0]

    @property
    def target(self) -> np.ndarray:
        return self.targets[self.task_id]

    def at_goal(self) -> bool:
        return bool(np.max(np.abs(self.agent_pos - self.target)) < EPS_FINE)


@dataclass
class Trajectory:
    targets: np.ndarray      # [G, D]
    task_id: int
    positions: np.ndarray    # [T + 1, D], positions[t] is the state before actions[t]
    actions: np.ndarray      # [T, D], normalized
    success: bool

    def __len__(self):
        return self.actions.shape[0]

    def state(self, t: int) -> EnvState:
        return EnvState(self.positions[t].copy(), self.targets, self.task_id, t)


def reset(seed: int, num_targets: int = 4, task_id: int = 0, dims: int = 2,
          layout: str = "random") -> EnvState:
    if num_targets < 2:
        raise ValueError("need at least two targets so the task id matters")
    if not 0 <= task_id < num_targets:
        raise ValueError(f"task_id {task_id} out of range [0, {num_targets})")
    rng = make_rng(seed)
    if layout == "symmetric":
        return _symmetric_reset(rng, num_targets, task_id, dims)
    if layout != "random":
        raise ValueError(f"unknown layout {layout!r}")
    agent = rng.uniform(-START_JITTER, START_JITTER, dims)
    for _ in range(MAX_PLACEMENT_TRIES):
        targets = rng.uniform(-TARGET_BOX, TARGET_BOX, (num_targets, dims))
        if _placement_ok(agent, targets):
            return EnvState(agent, targets, int(task_id), 0)
    raise GenerationError(
        f"could not place {num_targets} targets in {dims}D after {MAX_PLACEMENT_TRIES} tries")


def _placement_ok(agent, targets) -> bool:
    if np.min(np.linalg.norm(targets - agent, axis=1)) < MIN_START_DISTANCE:
        return False
    diff = targets[:, None, :] - targets[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    iu = np.triu_indices(len(targets), 1)
    return bool(np.all(dist[iu] >= MIN_SEPARATION))


def _symmetric_reset(rng, num_targets, task_id, dims):
    # targets evenly spaced on a circle around an exactly centered agent
    if dims != 2:
        raise ValueError("symmetric layouts are only defined for dims=2")
    phase = rng.uniform(0, 2 * np.pi)
    ang = phase + 2 * np.pi * np.arange(num_targets) / num_targets
    radius = 0.6
    targets = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return EnvState(np.zeros(2), targets, int(task_id), 0)


def step(state: EnvState, action) -> tuple[EnvState, bool, bool]:
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    pos = np.clip(state.agent_pos + a * STEP_SCALE, -1.0, 1.0)
    nxt = replace(state, agent_pos=pos, step_count=state.step_count + 1)
    success = nxt.at_goal()
    done = success or nxt.step_count >= HORIZON
    return nxt, done, success


def expert_action(state: EnvState, rng: np.random.Generator | None = None,
                  noise: float = EXPERT_NOISE, gain: float = EXPERT_GAIN) -> np.ndarray:
    """Proportional step toward the true target.

    The command is scaled down as a whole vector when any component exceeds 1,
    so the agent travels in a straight line. Noise is Gaussian with std
    ``noise``, clipped to +-``noise``.
    """
    a = gain * (state.target - state.agent_pos) / STEP_SCALE
    peak = np.max(np.abs(a))
    if peak > 1.0:
        a = a / peak
    if rng is not None and noise > 0:
        a = a + np.clip(rng.normal(0.0, noise, a.shape), -noise, noise)
    return np.clip(a, -1.0, 1.0)


def _grid(dims):
    return QuantizerConfig(OBS_GRID, dims)


def coarse_positions(x) -> np.ndarray:
    """Snap workspace positions to the centers of the planner grid cells."""
    x = np.asarray(x, dtype=float)
    g = _grid(x.shape[-1])
    return dequantize(quantize(x, g), g)


def observe(state: EnvState, channel: str) -> np.ndarray:
    if channel == "planner":
        onehot = np.zeros(state.num_targets)
        onehot[state.task_id] = 1.0
        return np.concatenate([coarse_positions(state.agent_pos),
                               coarse_positions(state.targets).ravel(), onehot])
    if channel == "refiner":
        return np.concatenate([state.agent_pos, state.targets.ravel()])
    raise ValueError(f"unknown channel {channel!r}; expected one of {CHANNELS}")


def obs_size(channel: str, dims: int, num_targets: int) -> int:
    if channel == "planner":
        return dims * (1 + num_targets) + num_targets
    if channel == "refiner":
        return dims * (1 + num_targets)
    raise ValueError(f"unknown channel {channel!r}")


def rollout_expert(state: EnvState, rng: np.random.Generator,
                   noise: float = EXPERT_NOISE) -> Trajectory:
    positions = [state.agent_pos.copy()]
    actions = []
    success = state.at_goal()
    done = success
    while not done:
        a = expert_action(state, rng, noise)
        state, done, success = step(state, a)
        actions.append(a)
        positions.append(state.agent_pos.copy())
    dims = state.dims
    return Trajectory(state.targets, state.task_id, np.array(positions).reshape(-1, dims),
                      np.array(actions).reshape(-1, dims), bool(success))
