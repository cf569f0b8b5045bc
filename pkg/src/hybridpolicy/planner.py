"""Coarse planner: one attention pass from an observation to a grid of bin logits.

The planner observation is split into entity tokens (agent and each target),
each run through a small shared encoder. Learnable query tokens, one per
(timestep, action dimension) slot, are placed in front of those context tokens,
a single attention block mixes everything, and the query outputs go through a
classification head shared by all slots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import (AttentionBlock, ConfigError, Linear, MLP, ParamStore, assign_params,
                      make_rng, softmax, softmax_ce)
from .toy_env import OBS_GRID, obs_size

SAMPLE_MODES = ("argmax", "categorical")
POS_SCALE = OBS_GRID / 2.0   # positions fed to the encoder in grid-cell units


@dataclass(frozen=True)
class PlannerConfig:
    dims: int = 2
    num_targets: int = 4
    n_bins: int = 10
    l_macro: int = 10
    width: int = 64
    depth: int = 2
    ffn_width: int = 128

    @property
    def num_queries(self) -> int:
        return self.l_macro * self.dims


class PlannerModel:
    def __init__(self, cfg: PlannerConfig, seed: int = 0, store: ParamStore | None = None):
        if cfg.n_bins < 2 or cfg.l_macro < 1 or cfg.depth < 1:
            raise ConfigError(f"invalid planner config {cfg}")
        self.cfg = cfg
        rng = make_rng(seed)
        self.store = ParamStore()
        D, d = cfg.dims, cfg.width
        self.token_features = 2 * D + 2
        self.encoder = MLP(self.store, "plan.enc", [self.token_features] + [d] * cfg.depth, rng)
        self.store.add("plan.queries", rng.standard_normal((cfg.num_queries, d)) * 0.5)
        self.block = AttentionBlock(self.store, "plan.attn", d, rng, ffn_width=cfg.ffn_width)
        self.head = Linear(self.store, "plan.head", d, cfg.n_bins, rng)
        if store is not None:
            assign_params(self.store, store)

    @property
    def attention_calls(self) -> int:
        return self.block.calls

    def entity_tokens(self, obs: np.ndarray) -> np.ndarray:
        """[B, P] planner observations -> [B, 1 + G, 2D + 2] token features."""
        c = self.cfg
        D, G = c.dims, c.num_targets
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if obs.shape[-1] != obs_size("planner", D, G):
            raise ConfigError(f"planner obs has {obs.shape[-1]} features, "
                              f"expected {obs_size('planner', D, G)}")
        B = obs.shape[0]
        pos = obs[:, :D * (1 + G)].reshape(B, 1 + G, D) * POS_SCALE
        rel = pos - pos[:, :1, :]
        is_agent = np.zeros((B, 1 + G, 1))
        is_agent[:, 0] = 1.0
        task = np.concatenate([np.zeros((B, 1)), obs[:, D * (1 + G):]], axis=1)[..., None]
        return np.concatenate([pos, rel, is_agent, task], axis=-1)

    def forward(self, obs):
        c = self.cfg
        feats = self.entity_tokens(obs)
        B = feats.shape[0]
        ctx, enc_cache = self.encoder.forward(feats)
        queries = np.broadcast_to(self.store["plan.queries"], (B, c.num_queries, c.width))
        seq = np.concatenate([queries, ctx], axis=1)
        out, blk_cache = self.block.forward(seq)
        z = out[:, :c.num_queries]
        logits, head_cache = self.head.forward(z)
        logits = logits.reshape(B, c.l_macro, c.dims, c.n_bins)
        return logits, (enc_cache, blk_cache, head_cache, B)

    def backward(self, cache, dlogits):
        c = self.cfg
        enc_cache, blk_cache, head_cache, B = cache
        dz = self.head.backward(head_cache, dlogits.reshape(B, c.num_queries, c.n_bins))
        dseq = np.zeros((B, c.num_queries + 1 + c.num_targets, c.width))
        dseq[:, :c.num_queries] = dz
        dseq = self.block.backward(blk_cache, dseq)
        self.store.grads["plan.queries"] += dseq[:, :c.num_queries].sum(axis=0)
        self.encoder.backward(enc_cache, dseq[:, c.num_queries:])


def plan_forward(model: PlannerModel, obs) -> np.ndarray:
    """Logits ``[B, L_macro, D, N]`` (or ``[L_macro, D, N]`` for a single obs)."""
    obs = np.asarray(obs, dtype=float)
    logits = model.forward(obs)[0]
    return logits[0] if obs.ndim == 1 else logits


def plan_loss(logits, gt):
    """Mean cross-entropy over every (timestep, dimension) slot."""
    return softmax_ce(logits, gt)


def sample_coarse(logits, mode: str = "argmax", rng: np.random.Generator | None = None):
    logits = np.asarray(logits, dtype=float)
    if mode == "argmax":
        return np.argmax(logits, axis=-1)   # first maximum wins ties
    if mode == "categorical":
        if rng is None:
            raise ValueError("categorical sampling needs an rng")
        p = softmax(logits)
        cdf = np.cumsum(p, axis=-1)
        u = rng.random(logits.shape[:-1] + (1,))
        idx = (cdf < u * cdf[..., -1:]).sum(axis=-1)
        return np.minimum(idx, logits.shape[-1] - 1)
    raise ValueError(f"unknown sample mode {mode!r}; expected one of {SAMPLE_MODES}")


def plan_accuracy(logits, gt) -> float:
    gt = np.asarray(gt)
    if np.shape(logits)[:-1] != gt.shape:
        raise ConfigError("logits and ground truth shapes differ")
    return float(np.mean(np.argmax(logits, axis=-1) == gt))
