"""Dual-rate execution: the planner refills an intent buffer, the refiner drains it.

The planner predicts ``M * H_chunk`` coarse rows in one pass whenever the
buffer is empty; every control chunk pops ``H_chunk`` rows, turns them into a
fine action chunk with the refiner, and executes it. Time is a simulated clock
charged ``c_plan`` per planner pass and ``c_refine`` per chunk, so runs are
fully deterministic.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import toy_env
from .hybrid_action import QuantizerConfig, compose
from .nn_core import ConfigError
from .planner import PlannerModel, sample_coarse
from .refiner import DiffusionSchedule, RefinerModel, denoise_sample

MODES = ("sync", "async")
TRACE_FIELDS = ("chunk", "planned", "clock_ms", "tokens", "success")

# Latency column of the horizon-factor ablation (ms per control chunk).
REPORTED_LATENCY_MS = {2: 122.0, 3: 112.0, 4: 107.0, 5: 104.0}


class ProtocolError(RuntimeError):
    """Buffer used out of protocol: refill while non-empty, or pop underflow."""


class IntentBuffer:
    """FIFO of coarse-token rows with a fixed capacity."""

    def __init__(self, capacity: int, dims: int):
        self.capacity, self.dims = capacity, dims
        self._rows: deque = deque()

    def __len__(self):
        return len(self._rows)

    @property
    def empty(self) -> bool:
        return not self._rows

    def push(self, rows):
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[1] != self.dims:
            raise ConfigError(f"expected rows of shape [n, {self.dims}], got {rows.shape}")
        if len(self._rows) + len(rows) > self.capacity:
            raise ProtocolError(f"push of {len(rows)} rows overflows buffer "
                                f"({len(self._rows)}/{self.capacity})")
        self._rows.extend(r.copy() for r in rows)

    def pop(self, n: int) -> np.ndarray:
        if n > len(self._rows):
            raise ProtocolError(f"pop of {n} rows from buffer holding {len(self._rows)}")
        return np.array([self._rows.popleft() for _ in range(n)]).reshape(n, self.dims)

    def clear(self):
        self._rows.clear()


@dataclass(frozen=True)
class HorizonConfig:
    m: int = 2
    h_chunk: int = 5

    def __post_init__(self):
        if self.m < 1 or self.h_chunk < 1:
            raise ConfigError("M and H_chunk must be positive")

    @property
    def l_macro(self) -> int:
        return self.m * self.h_chunk


@dataclass(frozen=True)
class ClockModel:
    c_refine: float = 92.0
    c_plan: float = 60.0

    def __post_init__(self):
        if self.c_refine < 0 or self.c_plan < 0:
            raise ConfigError("clock costs must be non-negative")


def amortized_latency(clock: ClockModel, m: int) -> float:
    if m < 1:
        raise ConfigError("M must be >= 1")
    return clock.c_refine + clock.c_plan / m


def fit_clock(m_a: int, lat_a: float, m_b: int, lat_b: float) -> ClockModel:
    """Solve c_refine + c_plan / M = latency from two (M, latency) rows."""
    if m_a == m_b:
        raise ConfigError("need two distinct M values")
    c_plan = (lat_a - lat_b) / (1.0 / m_a - 1.0 / m_b)
    return ClockModel(lat_a - c_plan / m_a, c_plan)


def refill(buffer: IntentBuffer, planner: PlannerModel, obs, rows: int,
           sample_mode: str = "argmax", rng=None) -> np.ndarray:
    """Plan from ``obs`` and push the first ``rows`` timesteps. Buffer must be empty."""
    if not buffer.empty:
        raise ProtocolError(f"refill requested with {len(buffer)} rows still buffered")
    if rows > planner.cfg.l_macro:
        raise ConfigError(f"requested {rows} rows but planner predicts {planner.cfg.l_macro}")
    logits = planner.forward(np.atleast_2d(obs))[0][0]
    plan = sample_coarse(logits[:rows], sample_mode, rng)
    buffer.push(plan)
    return plan


def pop_slice(buffer: IntentBuffer, h_chunk: int) -> np.ndarray:
    return buffer.pop(h_chunk)


@dataclass
class ChunkRecord:
    chunk: int
    planned: bool
    clock_ms: float
    tokens: np.ndarray | None     # [H, D] consumed intent rows
    actions: np.ndarray           # executed actions, [steps, D]
    success: bool
    plan: np.ndarray | None = None  # full rows pushed at this chunk's refill


@dataclass
class ExecutionTrace:
    mode: str
    m: int
    records: list = field(default_factory=list)
    success: bool = False
    steps: int = 0

    @property
    def num_chunks(self) -> int:
        return len(self.records)

    @property
    def planner_invocations(self) -> int:
        return sum(r.planned for r in self.records)

    def same_as(self, other: ExecutionTrace) -> bool:
        """Bit-exact comparison of everything except the mode label."""
        if (self.success, self.steps, self.num_chunks) != (other.success, other.steps,
                                                           other.num_chunks):
            return False
        for a, b in zip(self.records, other.records):
            if (a.chunk, a.planned, a.clock_ms, a.success) != (b.chunk, b.planned, b.clock_ms,
                                                               b.success):
                return False
            if not _same_array(a.tokens, b.tokens) or not _same_array(a.actions, b.actions):
                return False
        return True


def _same_array(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass
class Policy:
    """What runs inside an episode.

    ``kind`` is "hierarchical" (planner + intent-conditioned refiner),
    "monolithic" (refiner on the full observation, no planner), or "expert"
    (the scripted controller, noise-free).
    """
    kind: str
    planner: PlannerModel | None = None
    refiner: RefinerModel | None = None
    schedule: DiffusionSchedule | None = None
    sample_mode: str = "argmax"
    compose_mode: str = "direct"

    @property
    def h_chunk(self) -> int:
        if self.refiner is not None:
            return self.refiner.cfg.h_chunk
        return 5


def run_episodes(states, policy: Policy, horizon: HorizonConfig, mode: str, rngs,
                 clock: ClockModel | None = None) -> list[ExecutionTrace]:
    """Run several episodes in lockstep; each has its own buffer and generator.

    Batching only shares network evaluations: every episode follows the
    protocol of a lone run. Actions can differ from a lone run in the last
    bits, since BLAS sums in a batch-size dependent order; runs with the same
    batch are bit-exact.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    clock = clock or ClockModel()
    H = horizon.h_chunk
    if policy.kind != "expert" and policy.refiner is not None and policy.refiner.cfg.h_chunk != H:
        raise ConfigError("horizon H_chunk differs from the refiner's chunk length")
    rows_per_plan = H if mode == "sync" else horizon.l_macro
    if policy.kind == "hierarchical" and rows_per_plan > policy.planner.cfg.l_macro:
        raise ConfigError(f"M*H_chunk={rows_per_plan} exceeds trained l_macro="
                          f"{policy.planner.cfg.l_macro}")
    states = list(states)
    n = len(states)
    D = states[0].dims
    traces = [ExecutionTrace(mode, 1 if mode == "sync" else horizon.m) for _ in range(n)]
    buffers = [IntentBuffer(rows_per_plan, D) for _ in range(n)]
    clocks = [0.0] * n
    active = [i for i in range(n) if not states[i].at_goal()]
    for i in range(n):
        traces[i].success = states[i].at_goal()
    chunk = 0
    while active:
        planned = set()
        plans = {}
        tokens = None
        if policy.kind == "hierarchical":
            need = [i for i in active if mode == "sync" or buffers[i].empty]
            if need:
                obs = np.array([toy_env.observe(states[i], "planner") for i in need])
                logits = policy.planner.forward(obs)[0]
                for j, i in enumerate(need):
                    if not buffers[i].empty:
                        raise ProtocolError(f"episode {i}: refill with rows still buffered")
                    plan = sample_coarse(logits[j, :rows_per_plan], policy.sample_mode, rngs[i])
                    buffers[i].push(plan)
                    plans[i] = plan
                    planned.add(i)
                    clocks[i] += clock.c_plan
            tokens = np.array([pop_slice(buffers[i], H) for i in active])
        if policy.kind == "expert":
            actions = None
        else:
            r_obs = np.array([toy_env.observe(states[i], "refiner") for i in active])
            if policy.kind == "monolithic":
                p_obs = np.array([toy_env.observe(states[i], "planner") for i in active])
                r_obs = np.concatenate([p_obs, r_obs], axis=1)
            fine = denoise_sample(policy.refiner, r_obs, tokens, policy.schedule,
                                  [rngs[i] for i in active])
            if tokens is not None:
                qc = QuantizerConfig(policy.refiner.cfg.n_bins, D)
                actions = compose(tokens, fine, policy.compose_mode, qc)
            else:
                actions = fine
        still = []
        for j, i in enumerate(active):
            executed = []
            done = success = False
            for h in range(H):
                a = toy_env.expert_action(states[i], None) if actions is None else actions[j, h]
                states[i], done, success = toy_env.step(states[i], a)
                executed.append(np.asarray(a, dtype=float))
                if done:
                    break
            clocks[i] += clock.c_refine
            traces[i].records.append(ChunkRecord(
                chunk, i in planned, clocks[i],
                None if tokens is None else tokens[j].copy(),
                np.array(executed).reshape(-1, D), bool(success), plans.get(i)))
            traces[i].steps = states[i].step_count
            traces[i].success = bool(success)
            if not done:
                still.append(i)
        active = still
        chunk += 1
    return traces


def run_episode(state, policy: Policy, horizon: HorizonConfig, mode: str, rng,
                clock: ClockModel | None = None) -> ExecutionTrace:
    return run_episodes([state], policy, horizon, mode, [rng], clock)[0]


def measure_latency(trace: ExecutionTrace) -> float:
    """Simulated time per control chunk over a whole episode."""
    if not trace.records:
        raise ValueError("empty trace")
    return trace.records[-1].clock_ms / trace.num_chunks


def expected_invocations(num_chunks: int, m: int) -> int:
    return math.ceil(num_chunks / m)


def replay_plans(trace: ExecutionTrace):
    """Pair each refill's plan with the concatenation of slices popped after it.

    Yields ``(plan_rows, consumed_rows)``; for an uninterrupted horizon the two
    are equal, and an episode ending mid-horizon leaves a strict prefix.
    """
    current, consumed = None, []
    for rec in trace.records:
        if rec.planned:
            if current is not None:
                yield current, np.concatenate(consumed)
            current, consumed = rec.plan, []
        consumed.append(rec.tokens)
    if current is not None:
        yield current, np.concatenate(consumed)


def _format_tokens(tokens) -> str:
    if tokens is None:
        return ""
    return "|".join(" ".join(str(int(v)) for v in row) for row in tokens)


def write_trace(path, trace: ExecutionTrace, config_hash: str = ""):
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in trace.records:
            w.writerow([r.chunk, int(r.planned), repr(float(r.clock_ms)),
                        _format_tokens(r.tokens), int(r.success)])
