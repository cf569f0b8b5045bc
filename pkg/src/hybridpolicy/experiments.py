"""Training, evaluation and checkpoint plumbing shared by the CLI and the tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import toy_env
from .async_runtime import ClockModel, HorizonConfig, Policy, measure_latency, run_episodes
from .config import ExperimentConfig
from .curriculum import JointTrainer, LossWeights, TrainConfig
from .dataset import TrainingSet, generate_episodes, read_dataset
from .nn_core import Adam, AdamConfig, ConfigError, load_checkpoint, save_checkpoint
from .planner import PlannerConfig, PlannerModel
from .refiner import (DiffusionSchedule, RefinerConfig, RefinerModel, denoise_sample,
                      diffusion_loss)

MODES = ("hierarchical", "monolithic")
Z95 = 1.959963984540054


def derive_seed(seed: int, *path: int) -> int:
    """Independent 63-bit seed for a named sub-stream of ``seed``."""
    state = np.random.SeedSequence([seed & (2 ** 63 - 1), *path]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


# stream ids for derive_seed
_DATA, _PLANNER, _REFINER, _TRAIN, _EVAL = range(5)


def generate_training_episodes(cfg: ExperimentConfig):
    return generate_episodes(derive_seed(cfg.seed, _DATA), cfg.n_episodes, cfg.num_targets,
                             cfg.dims, cfg.expert_noise)


def training_episodes(cfg: ExperimentConfig, path=None, force: bool = False):
    """Episodes from ``path`` (or ``cfg.dataset``); generated in memory when neither is set."""
    path = path or cfg.dataset
    if not path:
        return generate_training_episodes(cfg)
    ds = read_dataset(path)
    if (ds.dims, ds.num_targets) != (cfg.dims, cfg.num_targets):
        raise ConfigError(f"dataset {path} has D={ds.dims}, G={ds.num_targets}; "
                          f"config wants D={cfg.dims}, G={cfg.num_targets}")
    if ds.config_hash != cfg.data_hash() and not force:
        raise ConfigError(f"dataset {path} was generated from config {ds.config_hash}, "
                          f"expected {cfg.data_hash()} (use --force to override)")
    return ds.episodes


def training_set(cfg: ExperimentConfig, episodes=None) -> TrainingSet:
    episodes = training_episodes(cfg) if episodes is None else episodes
    return TrainingSet(episodes, cfg.l_macro)


def planner_config(cfg: ExperimentConfig) -> PlannerConfig:
    return PlannerConfig(cfg.dims, cfg.num_targets, cfg.n_bins, cfg.l_macro, cfg.planner_width,
                         cfg.planner_depth, cfg.planner_ffn)


def refiner_config(cfg: ExperimentConfig, mode: str = "hierarchical",
                   width: int | None = None) -> RefinerConfig:
    mono = mode == "monolithic"
    return RefinerConfig(cfg.dims, cfg.num_targets, cfg.n_bins, cfg.h_chunk, cfg.d_emb,
                         width or cfg.refiner_width, cfg.refiner_depth, cfg.geo_width,
                         use_intent=not mono, obs_mode="full" if mono else "refiner")


def monolithic_width(cfg: ExperimentConfig) -> int:
    """Smallest refiner width whose parameter count reaches the hierarchical total."""
    target = (PlannerModel(planner_config(cfg)).store.num_params()
              + RefinerModel(refiner_config(cfg)).store.num_params())
    w = cfg.refiner_width
    while RefinerModel(refiner_config(cfg, "monolithic", w)).store.num_params() < target:
        w += 8
    return w


def train_config(cfg: ExperimentConfig, strategy: str | None = None,
                 steps: int | None = None) -> TrainConfig:
    return TrainConfig(n_bins=cfg.n_bins, h_chunk=cfg.h_chunk, tau=cfg.tau,
                       ema_decay=cfg.ema_decay,
                       weights=LossWeights(cfg.lambda_diff, cfg.lambda_plan), lr=cfg.lr,
                       warmup=cfg.warmup,
                       steps=cfg.train_steps if steps is None else steps,
                       batch_size=cfg.batch_size, weight_decay=cfg.weight_decay,
                       strategy=strategy or cfg.strategy, latch=cfg.latch,
                       intent_sampling=cfg.intent_sampling, compose_mode=cfg.compose_mode)


@dataclass
class Models:
    mode: str
    planner: PlannerModel | None
    refiner: RefinerModel
    schedule: DiffusionSchedule
    log: list = field(default_factory=list)
    switch_step: int | None = None

    def policy(self, cfg: ExperimentConfig) -> Policy:
        return Policy(self.mode, self.planner, self.refiner, self.schedule, cfg.sample_mode,
                      cfg.compose_mode)


def build_models(cfg: ExperimentConfig, mode: str = "hierarchical") -> Models:
    if mode not in MODES:
        raise ConfigError(f"unknown training mode {mode!r}; expected one of {MODES}")
    schedule = DiffusionSchedule(cfg.k_diff)
    if mode == "monolithic":
        rcfg = refiner_config(cfg, mode, monolithic_width(cfg))
        return Models(mode, None, RefinerModel(rcfg, derive_seed(cfg.seed, _REFINER)), schedule)
    planner = PlannerModel(planner_config(cfg), derive_seed(cfg.seed, _PLANNER))
    refiner = RefinerModel(refiner_config(cfg), derive_seed(cfg.seed, _REFINER))
    return Models(mode, planner, refiner, schedule)


def make_trainer(cfg: ExperimentConfig, data: TrainingSet, mode: str = "hierarchical",
                 strategy: str | None = None, steps: int | None = None) -> tuple[Models, JointTrainer]:
    models = build_models(cfg, mode)
    trainer = JointTrainer(models.planner, models.refiner, models.schedule, data,
                           train_config(cfg, strategy, steps), derive_seed(cfg.seed, _TRAIN))
    models.log = trainer.log
    return models, trainer


def train(cfg: ExperimentConfig, data: TrainingSet, mode: str = "hierarchical",
          strategy: str | None = None, steps: int | None = None, callback=None) -> Models:
    models, trainer = make_trainer(cfg, data, mode, strategy, steps)
    trainer.run(callback=callback)
    models.switch_step = trainer.state.switch_step
    return models


# ---------------------------------------------------------------- evaluation

def binomial_interval(successes: int, n: int) -> tuple[float, float]:
    """Wilson score interval at 95%."""
    if n <= 0:
        raise ValueError("need at least one trial")
    p = successes / n
    denom = 1 + Z95 ** 2 / n
    center = (p + Z95 ** 2 / (2 * n)) / denom
    half = Z95 * math.sqrt(p * (1 - p) / n + Z95 ** 2 / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass
class EvalResult:
    successes: np.ndarray
    traces: list
    latency_ms: float

    @property
    def n(self) -> int:
        return len(self.successes)

    @property
    def rate(self) -> float:
        return float(np.mean(self.successes))

    @property
    def interval(self) -> tuple[float, float]:
        return binomial_interval(int(np.sum(self.successes)), self.n)

    @property
    def half_width(self) -> float:
        lo, hi = self.interval
        return (hi - lo) / 2


def eval_states(cfg: ExperimentConfig, n: int | None = None, layout: str | None = None,
                seed: int | None = None) -> list:
    """Evaluation episodes cycle through every task id in turn."""
    n = cfg.eval_episodes if n is None else n
    base = derive_seed(cfg.seed if seed is None else seed, _EVAL)
    layout = layout or cfg.eval_layout
    return [toy_env.reset(derive_seed(base, i), cfg.num_targets, i % cfg.num_targets, cfg.dims,
                          layout) for i in range(n)]


def evaluate(models: Models | None, cfg: ExperimentConfig, n: int | None = None,
             mode: str = "async", m: int | None = None, layout: str | None = None,
             seed: int | None = None, clock: ClockModel | None = None,
             expert: bool = False) -> EvalResult:
    states = eval_states(cfg, n, layout, seed)
    base = derive_seed(cfg.seed if seed is None else seed, _EVAL, 1)
    rngs = [np.random.default_rng(derive_seed(base, i)) for i in range(len(states))]
    horizon = HorizonConfig(cfg.m_factor if m is None else m, cfg.h_chunk)
    policy = Policy("expert") if expert else models.policy(cfg)
    traces = run_episodes(states, policy, horizon, mode, rngs, clock)
    lat = float(np.mean([measure_latency(t) for t in traces if t.records])) if traces else 0.0
    return EvalResult(np.array([t.success for t in traces], dtype=bool), traces, lat)


# ---------------------------------------------------------------- two-mode check

TWO_MODES = np.array([[0.6, -0.3], [-0.4, 0.5]])


@dataclass
class TwoModeResult:
    refiner: RefinerModel
    schedule: DiffusionSchedule
    obs: np.ndarray
    modes: np.ndarray        # [2, H, D]


def train_two_mode(seed: int = 0, steps: int = 12000, h_chunk: int = 5, width: int = 128,
                   batch_size: int = 128, n_obs: int = 256) -> TwoModeResult:
    """Fit the refiner to a task whose target chunk is chosen only by the intent token.

    Token 0 (every slot) maps to a chunk repeating ``TWO_MODES[0]``, token 1
    to ``TWO_MODES[1]``. Observations are random environment states and carry
    no information about the mode.
    """
    rng = np.random.default_rng(derive_seed(seed, _TRAIN, 2))
    obs = np.array([toy_env.observe(toy_env.reset(derive_seed(seed, _DATA, 2, i), 4, 0),
                                    "refiner") for i in range(n_obs)])
    modes = np.repeat(TWO_MODES[:, None, :], h_chunk, axis=1)
    cfg = RefinerConfig(n_bins=2, h_chunk=h_chunk, width=width, depth=3)
    refiner = RefinerModel(cfg, derive_seed(seed, _REFINER, 2))
    schedule = DiffusionSchedule(50)
    opt = Adam(refiner.store, AdamConfig(lr=1e-3, warmup=100, total_steps=steps))
    for _ in range(steps):
        c = rng.integers(0, 2, batch_size)
        idx = rng.integers(0, n_obs, batch_size)
        tokens = np.broadcast_to(c[:, None, None], (batch_size, h_chunk, 2))
        refiner.store.zero_grad()
        diffusion_loss(refiner, modes[c], obs[idx], tokens, rng, schedule)
        opt.step()
    return TwoModeResult(refiner, schedule, obs, modes)


def two_mode_samples(res: TwoModeResult, tokens: np.ndarray, seed: int = 1) -> np.ndarray:
    """One sample per row of ``tokens`` (shape ``[B]``), each at a different observation."""
    B = len(tokens)
    obs = res.obs[np.arange(B) % len(res.obs)]
    H = res.refiner.cfg.h_chunk
    tok = np.broadcast_to(np.asarray(tokens)[:, None, None], (B, H, 2))
    return denoise_sample(res.refiner, obs, tok, res.schedule, np.random.default_rng(seed))


def mode_hits(samples: np.ndarray, modes: np.ndarray, selected: np.ndarray,
              tol: float = 0.05) -> np.ndarray:
    """True where a sample lies within ``tol`` (max-norm) of its selected mode."""
    return np.max(np.abs(samples - modes[selected]), axis=(1, 2)) <= tol


# ---------------------------------------------------------------- checkpoints

def save_models(out_dir, models: Models, cfg: ExperimentConfig):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    meta = {"mode": models.mode, "width": models.refiner.cfg.width}
    save_checkpoint(out / "refiner.ckpt", models.refiner.store, h, meta)
    if models.planner is not None:
        save_checkpoint(out / "planner.ckpt", models.planner.store, h, {"mode": models.mode})


def load_models(ckpt_dir, cfg: ExperimentConfig, force: bool = False) -> Models:
    d = Path(ckpt_dir)
    store, h, meta = load_checkpoint(d / "refiner.ckpt")
    if h != cfg.hash() and not force:
        raise ConfigError(f"checkpoint config hash {h} does not match config hash {cfg.hash()} "
                          f"(use --force to override)")
    mode = meta.get("mode", "hierarchical")
    if mode not in MODES:
        raise ConfigError(f"checkpoint has unknown mode {mode!r}")
    schedule = DiffusionSchedule(cfg.k_diff)
    refiner = RefinerModel(refiner_config(cfg, mode, int(meta.get("width", cfg.refiner_width))),
                           store=store)
    planner = None
    if mode == "hierarchical":
        pstore, ph, _ = load_checkpoint(d / "planner.ckpt")
        if ph != h:
            raise ConfigError("planner and refiner checkpoints come from different configs")
        planner = PlannerModel(planner_config(cfg), store=pstore)
    return Models(mode, planner, refiner, schedule)
