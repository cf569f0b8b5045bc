"""Conditional diffusion refiner over short chunks of fine actions.

The noise predictor is an MLP fed with the flattened noisy chunk, a sinusoidal
timestep embedding, an encoding of the exact-position observation, and the
concatenated codebook rows for the coarse tokens of the chunk. With
``use_intent=False`` the intent input is dropped, which gives the monolithic
baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn_core import MLP, ConfigError, ParamStore, TrainingError, assign_params, make_rng, mse
from .toy_env import STEP_SCALE, obs_size

OBS_MODES = ("refiner", "full")
MAX_BETA = 0.999


@dataclass(frozen=True)
class RefinerConfig:
    dims: int = 2
    num_targets: int = 4
    n_bins: int = 10
    h_chunk: int = 5
    d_emb: int = 8
    width: int = 256
    depth: int = 3
    geo_width: int = 64
    time_dim: int = 32
    use_intent: bool = True
    obs_mode: str = "refiner"     # "full" adds the planner channel (monolithic baseline)


class DiffusionSchedule:
    """Linear beta schedule with cumulative products.

    Index ``k`` runs from 0 (least noise) to ``num_steps - 1`` (most noise).
    """

    def __init__(self, num_steps: int = 50, beta_start: float | None = None,
                 beta_end: float | None = None):
        if num_steps < 1:
            raise ConfigError("need at least one diffusion step")
        # endpoints scaled so the chain ends near pure noise at any length,
        # capped below 1 for very short chains
        scale = 1000.0 / num_steps
        beta_start = min(1e-4 * scale, 0.5) if beta_start is None else beta_start
        beta_end = min(0.02 * scale, MAX_BETA) if beta_end is None else beta_end
        if num_steps == 1:
            self.betas = np.array([beta_end])
        else:
            self.betas = np.linspace(beta_start, beta_end, num_steps)
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ConfigError("betas must lie in (0, 1)")
        self.num_steps = num_steps
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)
        self.alpha_bar_prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.posterior_var = self.betas * (1 - self.alpha_bar_prev) / (1 - self.alpha_bar)
        self.coef_x0 = np.sqrt(self.alpha_bar_prev) * self.betas / (1 - self.alpha_bar)
        self.coef_xk = np.sqrt(self.alphas) * (1 - self.alpha_bar_prev) / (1 - self.alpha_bar)


def forward_noise(a0, k, eps, schedule: DiffusionSchedule):
    """x_k = sqrt(abar_k) a0 + sqrt(1 - abar_k) eps; ``k`` scalar or per-row."""
    a0 = np.asarray(a0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if a0.shape != eps.shape:
        raise ConfigError("a0 and eps must have the same shape")
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k >= schedule.num_steps):
        raise ValueError(f"diffusion index out of range [0, {schedule.num_steps})")
    ab = schedule.alpha_bar[k]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (a0.ndim - ab.ndim))
    return np.sqrt(ab) * a0 + np.sqrt(1 - ab) * eps


def timestep_embedding(k, dim: int) -> np.ndarray:
    k = np.atleast_1d(np.asarray(k, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(100.0) * np.arange(half) / max(1, half - 1))
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class RefinerModel:
    def __init__(self, cfg: RefinerConfig, seed: int = 0, store: ParamStore | None = None):
        if cfg.obs_mode not in OBS_MODES:
            raise ConfigError(f"unknown obs_mode {cfg.obs_mode!r}")
        self.cfg = cfg
        rng = make_rng(seed)
        self.store = ParamStore()
        D, H = cfg.dims, cfg.h_chunk
        self.chunk_size = H * D
        self.geo = MLP(self.store, "ref.geo", [self.feature_size, cfg.geo_width, cfg.geo_width],
                       rng, final_activation=True)
        n_in = self.chunk_size + cfg.time_dim + cfg.geo_width
        if cfg.use_intent:
            self.store.add("ref.codebook", rng.standard_normal((cfg.n_bins, cfg.d_emb)))
            n_in += self.chunk_size * cfg.d_emb
        self.net = MLP(self.store, "ref.eps", [n_in] + [cfg.width] * cfg.depth + [self.chunk_size],
                       rng, out_scale=0.01)
        self.eps_calls = 0
        if store is not None:
            assign_params(self.store, store)

    @property
    def obs_width(self) -> int:
        c = self.cfg
        n = obs_size("refiner", c.dims, c.num_targets)
        if c.obs_mode == "full":
            n += obs_size("planner", c.dims, c.num_targets)
        return n

    @property
    def feature_size(self) -> int:
        c = self.cfg
        return self.obs_width - c.dims + c.num_targets * c.dims

    def features(self, obs) -> np.ndarray:
        """Target offsets from the agent, raw and passed through ``tanh(x / step)``.

        The expert only depends on these offsets, so dropping the absolute
        agent position lets states off the demonstrated paths borrow from
        demonstrations with the same relative geometry. The refiner channel
        has no task id, so targets are listed nearest first. In "full" mode
        ``obs`` is the planner channel followed by the refiner channel; the
        planner channel is passed through and targets keep their index order
        so the task one-hot still lines up with them.
        """
        c = self.cfg
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if obs.shape[-1] != self.obs_width:
            raise ConfigError(f"refiner obs has {obs.shape[-1]} features, expected {self.obs_width}")
        n_ref = obs_size("refiner", c.dims, c.num_targets)
        ref = obs[:, -n_ref:]
        agent = ref[:, :c.dims]
        rel = ref[:, c.dims:].reshape(len(obs), c.num_targets, c.dims) - agent[:, None, :]
        if c.obs_mode == "full":
            out = [obs[:, :-n_ref]]
        else:
            # nearest first: without a task id, slot order is the only useful order
            order = np.argsort(np.sum(rel * rel, axis=-1), axis=1, kind="stable")
            rel = np.take_along_axis(rel, order[:, :, None], axis=1)
            out = []
        rel = rel.reshape(len(obs), -1)
        # the saturating copy resolves offsets on the scale of a single step
        out += [rel, np.tanh(rel / STEP_SCALE)]
        return np.concatenate(out, axis=1)

    def forward(self, x_k, k, obs, tokens=None):
        c = self.cfg
        x_k = np.asarray(x_k, dtype=float)
        B = x_k.shape[0]
        if x_k.shape[1:] != (c.h_chunk, c.dims):
            raise ConfigError(f"noisy chunk must be [B, {c.h_chunk}, {c.dims}], got {x_k.shape}")
        self.eps_calls += 1
        g, geo_cache = self.geo.forward(self.features(obs))
        k = np.broadcast_to(np.asarray(k), (B,))
        parts = [x_k.reshape(B, -1), timestep_embedding(k, c.time_dim), g]
        if c.use_intent:
            if tokens is None:
                raise ConfigError("intent-conditioned refiner needs coarse tokens")
            parts.append(embed_intent(tokens, self.store["ref.codebook"]).reshape(B, -1))
        out, net_cache = self.net.forward(np.concatenate(parts, axis=1))
        return out.reshape(B, c.h_chunk, c.dims), (geo_cache, net_cache, tokens, B)

    def backward(self, cache, d_eps):
        c = self.cfg
        geo_cache, net_cache, tokens, B = cache
        d_in = self.net.backward(net_cache, d_eps.reshape(B, -1))
        off = self.chunk_size + c.time_dim
        self.geo.backward(geo_cache, d_in[:, off:off + c.geo_width])
        if c.use_intent:
            d_e = d_in[:, off + c.geo_width:]
            embed_intent_backward(tokens, d_e, self.store.grads["ref.codebook"])

    def predict_eps(self, x_k, k, obs, tokens=None):
        return self.forward(x_k, k, obs, tokens)[0]


def embed_intent(tokens, codebook) -> np.ndarray:
    """Codebook rows for each (timestep, dimension) token, concatenated in that order.

    ``tokens`` is ``[..., H, D]``; result is ``[..., H * D * d_emb]``.
    """
    tokens = np.asarray(tokens)
    n = codebook.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= n):
        raise ValueError(f"intent token out of range [0, {n})")
    rows = codebook[tokens]
    lead = tokens.shape[:-2]
    return rows.reshape(lead + (-1,))


def embed_intent_backward(tokens, d_emb_flat, codebook_grad):
    tokens = np.asarray(tokens)
    d = codebook_grad.shape[1]
    np.add.at(codebook_grad, tokens.reshape(-1), d_emb_flat.reshape(-1, d))


def diffusion_loss(model: RefinerModel, a0, obs, tokens, rng, schedule: DiffusionSchedule,
                   k=None, eps=None, weight: float = 1.0, backward: bool = True) -> float:
    """Noise-prediction MSE for one batch.

    ``k`` and ``eps`` are drawn from ``rng`` unless given. When ``backward`` is
    set, ``weight`` times the loss gradient is accumulated into
    ``model.store.grads``.
    """
    a0 = np.asarray(a0, dtype=float)
    B = a0.shape[0]
    if k is None:
        k = rng.integers(0, schedule.num_steps, B)
    if eps is None:
        eps = rng.standard_normal(a0.shape)
    x_k = forward_noise(a0, k, eps, schedule)
    pred, cache = model.forward(x_k, k, obs, tokens)
    loss, d_pred = mse(pred, eps)
    if not math.isfinite(loss):
        raise TrainingError("non-finite diffusion loss")
    if backward:
        model.backward(cache, weight * d_pred)
    return loss


def denoise_sample(model: RefinerModel, obs, tokens, schedule: DiffusionSchedule, rng,
                   clip_x0: bool = True) -> np.ndarray:
    """Ancestral sampling from pure noise down to index 0.

    ``rng`` is one Generator for the whole batch, or a list with one Generator
    per row (rows then stay reproducible independent of batch composition).
    The last step adds no noise. Returns ``[B, H, D]`` clipped to [-1, 1].
    """
    c = model.cfg
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    B = obs.shape[0]
    shape = (c.h_chunk, c.dims)

    def draw():
        if isinstance(rng, (list, tuple)):
            return np.stack([r.standard_normal(shape) for r in rng])
        return rng.standard_normal((B,) + shape)

    x = draw()
    for k in range(schedule.num_steps - 1, -1, -1):
        eps = model.predict_eps(x, np.full(B, k), obs, tokens)
        ab = schedule.alpha_bar[k]
        x0 = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        if clip_x0:
            x0 = np.clip(x0, -1.0, 1.0)
        mean = schedule.coef_x0[k] * x0 + schedule.coef_xk[k] * x
        if k > 0:
            x = mean + math.sqrt(schedule.posterior_var[k]) * draw()
        else:
            x = mean
    return np.clip(x, -1.0, 1.0)
