"""Joint planner/refiner training with a teacher-forcing curriculum.

The refiner is conditioned on ground-truth coarse tokens until the planner's
running accuracy reaches ``tau``; from then on it sees tokens sampled from the
planner. The switch is a one-way latch unless ``latch=False``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import TrainingSet
from .hybrid_action import QuantizerConfig, dequantize
from .nn_core import Adam, AdamConfig, TrainingError, make_rng
from .planner import PlannerModel, plan_accuracy, plan_loss, sample_coarse
from .refiner import DiffusionSchedule, RefinerModel, diffusion_loss

GROUND_TRUTH = "gt"
PREDICTED = "pred"
NO_INTENT = "none"
STRATEGIES = ("dynamic", "pure_tf", "no_tf")
METRIC_FIELDS = ("step", "l_plan", "l_diff", "l_total", "acc_ema", "source")


@dataclass
class CurriculumState:
    accuracy_ema: float = 0.0
    ema_decay: float = 0.99
    switched: bool = False
    switch_step: int | None = None

    def update(self, accuracy: float):
        self.accuracy_ema = self.ema_decay * self.accuracy_ema + (1 - self.ema_decay) * accuracy


@dataclass(frozen=True)
class LossWeights:
    lambda_diff: float = 1.0
    lambda_plan: float = 0.5

    def __post_init__(self):
        if self.lambda_diff < 0 or self.lambda_plan < 0:
            raise ValueError("loss weights must be non-negative")


def select_intent_source(state: CurriculumState, tau: float, step: int | None = None,
                         latch: bool = True) -> str:
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    if latch and state.switched:
        return PREDICTED
    if state.accuracy_ema >= tau:
        if not state.switched:
            state.switched = True
            state.switch_step = step
        return PREDICTED
    return GROUND_TRUTH


def total_loss(l_diff: float, l_plan: float, w: LossWeights) -> float:
    return w.lambda_diff * l_diff + w.lambda_plan * l_plan


@dataclass
class TrainConfig:
    n_bins: int = 10
    h_chunk: int = 5
    tau: float = 0.9
    ema_decay: float = 0.99
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    warmup: int = 100
    steps: int = 3000
    batch_size: int = 128
    weight_decay: float = 0.0
    strategy: str = "dynamic"
    latch: bool = True
    intent_sampling: str = "categorical"
    compose_mode: str = "direct"

    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, warmup=self.warmup, total_steps=self.steps,
                          weight_decay=self.weight_decay)


def fine_target(actions, tokens, mode: str, n_bins: int):
    """What the refiner regresses: the action itself, or its in-bin residual."""
    if mode == "direct":
        return actions
    if mode == "residual":
        centers = dequantize(tokens, QuantizerConfig(n_bins, actions.shape[-1]))
        return np.clip((actions - centers) * n_bins, -1.0, 1.0)
    raise ValueError(f"unknown compose mode {mode!r}")


class JointTrainer:
    """Hierarchical training; ``planner=None`` trains a monolithic refiner alone."""

    def __init__(self, planner: PlannerModel | None, refiner: RefinerModel,
                 schedule: DiffusionSchedule, data: TrainingSet, cfg: TrainConfig, seed: int = 0):
        if cfg.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {cfg.strategy!r}; expected one of {STRATEGIES}")
        self.planner, self.refiner = planner, refiner
        self.schedule, self.data, self.cfg = schedule, data, cfg
        self.rng = make_rng(seed)
        self.state = CurriculumState(ema_decay=cfg.ema_decay)
        self.opt_r = Adam(refiner.store, cfg.adam())
        self.opt_p = Adam(planner.store, cfg.adam()) if planner is not None else None
        self.coarse = data.coarse_targets(cfg.n_bins) if planner is not None else None
        self.step_index = 0
        self.log: list[dict] = []

    @property
    def monolithic(self) -> bool:
        return self.planner is None

    def choose_source(self) -> str:
        s = self.cfg.strategy
        if s == "pure_tf":
            return GROUND_TRUTH
        if s == "no_tf":
            return PREDICTED
        return select_intent_source(self.state, self.cfg.tau, self.step_index, self.cfg.latch)

    def train_step(self, idx: np.ndarray | None = None) -> dict:
        cfg = self.cfg
        H = cfg.h_chunk
        if idx is None:
            idx = self.data.batch(self.rng, cfg.batch_size)
        actions = self.data.future[idx, :H]
        r_obs = self.data.refiner_obs[idx]
        l_plan = 0.0
        source = NO_INTENT
        tokens = None
        if self.monolithic:
            obs = np.concatenate([self.data.planner_obs[idx], r_obs], axis=1)
        else:
            obs = r_obs
            self.planner.store.zero_grad()
            logits, cache = self.planner.forward(self.data.planner_obs[idx])
            gt = self.coarse[idx]
            l_plan, dlogits = plan_loss(logits, gt)
            self.planner.backward(cache, cfg.weights.lambda_plan * dlogits)
            self.state.update(plan_accuracy(logits, gt))
            source = self.choose_source()
            if source == GROUND_TRUTH:
                tokens = gt[:, :H]
            else:
                tokens = sample_coarse(logits[:, :H], cfg.intent_sampling, self.rng)
        target = fine_target(actions, tokens, cfg.compose_mode, cfg.n_bins)
        self.refiner.store.zero_grad()
        l_diff = diffusion_loss(self.refiner, target, obs, tokens, self.rng, self.schedule,
                                weight=cfg.weights.lambda_diff)
        l_tot = total_loss(l_diff, l_plan, cfg.weights)
        if not math.isfinite(l_tot):
            raise TrainingError(f"non-finite loss at step {self.step_index}: "
                                f"l_plan={l_plan} l_diff={l_diff}")
        self.opt_r.step()
        if self.opt_p is not None:
            self.opt_p.step()
        row = {"step": self.step_index, "l_plan": l_plan, "l_diff": l_diff, "l_total": l_tot,
               "acc_ema": self.state.accuracy_ema, "source": source}
        self.log.append(row)
        self.step_index += 1
        return row

    def run(self, steps: int | None = None, callback=None) -> list[dict]:
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            row = self.train_step()
            if callback is not None:
                callback(self, row)
        return self.log


def write_metrics(path, rows, config_hash: str = ""):
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["step"], repr(float(r["l_plan"])), repr(float(r["l_diff"])),
                        repr(float(r["l_total"])), repr(float(r["acc_ema"])), r["source"]])


def source_boundaries(sources) -> int:
    """Number of positions where the intent source changes."""
    return sum(1 for a, b in zip(sources[:-1], sources[1:]) if a != b)


def switch_transient(l_diff, switch_step: int, window: int = 100, horizon: int = 2000):
    """Did the refiner loss rise right after the switch and then recover?

    Compares the mean loss over ``window`` steps after the switch with the
    ``window`` steps before it, and looks for a later window (within
    ``horizon`` steps) whose mean drops back below the pre-switch level.
    Returns ``(rose, recovered, recovery_step)``.
    """
    l = np.asarray(l_diff, dtype=float)
    s = switch_step
    if s is None or s < window or s + window > len(l):
        return False, False, None
    pre = l[s - window:s].mean()
    post = l[s:s + window].mean()
    rose = bool(post > pre)
    end = min(len(l), s + horizon)
    csum = np.concatenate([[0.0], np.cumsum(l)])
    for start in range(s + window, end - window + 1):
        if (csum[start + window] - csum[start]) / window < pre:
            return rose, True, start + window
    return rose, False, None
