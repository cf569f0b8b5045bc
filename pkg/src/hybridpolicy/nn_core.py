"""Small numpy compute core with hand-written backward passes.

Every layer exposes ``forward(x) -> (y, cache)`` and ``backward(cache, dy) -> dx``.
Parameter gradients are accumulated into the owning :class:`ParamStore`, so a
training step is ``store.zero_grad(); forward; backward; optimizer.step()``.
All arithmetic is float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTYPE = np.float64


class ConfigError(ValueError):
    """Raised on shape or configuration mismatches."""


class TrainingError(RuntimeError):
    """Raised when a loss or gradient becomes non-finite."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent, reproducible generators, one per worker/episode."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


class ParamStore:
    """Named parameter arrays with paired gradient buffers."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise ConfigError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=DTYPE)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def num_params(self) -> int:
        return sum(v.size for v in self.values.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def load_flat(self, vec: np.ndarray):
        offset = 0
        for v in self.values.values():
            v[...] = vec[offset:offset + v.size].reshape(v.shape)
            offset += v.size

    def copy(self) -> ParamStore:
        out = ParamStore()
        for k, v in self.values.items():
            out.add(k, v.copy())
        return out

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.values.values())


# --------------------------------------------------------------------------
# activations

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_tanh(x):
    return np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))


def gelu(x):
    return 0.5 * x * (1.0 + _gelu_tanh(x))


def gelu_grad(x, t=None):
    """Derivative of the tanh-approximated GELU; ``t`` reuses the forward tanh."""
    if t is None:
        t = _gelu_tanh(x)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


def _gelu_fwd(x):
    t = _gelu_tanh(x)
    return 0.5 * x * (1.0 + t), t


def _tanh_fwd(x):
    t = np.tanh(x)
    return t, t


def tanh_grad(x, t=None):
    if t is None:
        t = np.tanh(x)
    return 1.0 - t * t


# name -> (forward returning (y, aux), grad(x, aux))
ACTIVATIONS = {
    "gelu": (_gelu_fwd, gelu_grad),
    "tanh": (_tanh_fwd, tanh_grad),
}


# --------------------------------------------------------------------------
# layers

class Linear:
    """y = x @ W + b over the last axis; any leading batch dims."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator | None = None, scale: float | None = None):
        self.store, self.name = store, name
        self.n_in, self.n_out = n_in, n_out
        if scale is None:
            scale = 1.0 / math.sqrt(n_in)
        w = rng.standard_normal((n_in, n_out)) * scale if rng is not None else np.zeros((n_in, n_out))
        store.add(name + ".W", w)
        store.add(name + ".b", np.zeros(n_out))

    def __call__(self, x):
        return self.forward(x)[0]

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.n_in:
            raise ConfigError(f"{self.name}: expected last dim {self.n_in}, got {x.shape}")
        # one 2-D matmul is much faster than numpy's batched small ones
        y = x.reshape(-1, self.n_in) @ self.store[self.name + ".W"] + self.store[self.name + ".b"]
        return y.reshape(x.shape[:-1] + (self.n_out,)), x

    def backward(self, x, dy):
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.store.grads[self.name + ".W"] += x2.T @ dy2
        self.store.grads[self.name + ".b"] += dy2.sum(axis=0)
        return (dy2 @ self.store[self.name + ".W"].T).reshape(dy.shape[:-1] + (self.n_in,))


class MLP:
    """Stack of Linear layers with an activation between them.

    ``widths`` lists every layer size including input and output, so
    ``MLP(store, "enc", [4, 32, 32])`` is a 2-layer network.
    """

    def __init__(self, store, name, widths, rng=None, activation="gelu",
                 final_activation=False, out_scale=None):
        if len(widths) < 2:
            raise ConfigError("MLP needs at least input and output widths")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.act, self.dact = ACTIVATIONS[activation]
        self.final_activation = final_activation
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            scale = out_scale if (last and out_scale is not None) else None
            self.layers.append(Linear(store, f"{name}.{i}", a, b, rng, scale=scale))
        self.n_in, self.n_out = widths[0], widths[-1]

    def __call__(self, x):
        return self.forward(x)[0]

    def forward(self, x):
        caches = []
        h = x
        for i, layer in enumerate(self.layers):
            z, c = layer.forward(h)
            if i < len(self.layers) - 1 or self.final_activation:
                h, aux = self.act(z)
                caches.append((c, (z, aux)))
            else:
                h = z
                caches.append((c, None))
        return h, caches

    def backward(self, caches, dy):
        g = dy
        for layer, (c, act) in zip(reversed(self.layers), reversed(caches)):
            if act is not None:
                g = g * self.dact(*act)
            g = layer.backward(c, g)
        return g


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class AttentionBlock:
    """Single-head bidirectional self-attention with residual, plus an
    optional position-wise GELU feed-forward sublayer with its own residual.

    Input and output are ``[..., T, d]``.
    """

    def __init__(self, store, name, d, rng=None, ffn_width=0):
        self.store, self.name, self.d = store, name, d
        self.q = Linear(store, name + ".q", d, d, rng)
        self.k = Linear(store, name + ".k", d, d, rng)
        self.v = Linear(store, name + ".v", d, d, rng)
        self.o = Linear(store, name + ".o", d, d, rng)
        self.ffn = MLP(store, name + ".ffn", [d, ffn_width, d], rng) if ffn_width else None
        self.calls = 0

    def __call__(self, x):
        return self.forward(x)[0]

    def attend(self, x):
        """The attention sublayer alone, without the residual."""
        return self._attend(x)[0]

    def _attend(self, x):
        q, cq = self.q.forward(x)
        k, ck = self.k.forward(x)
        v, cv = self.v.forward(x)
        scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(self.d)
        p = softmax(scores)
        a = p @ v
        out, co = self.o.forward(a)
        return out, (cq, ck, cv, co, q, k, v, p)

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim < 2 or x.shape[-1] != self.d:
            raise ConfigError(f"{self.name}: expected [..., T, {self.d}], got {x.shape}")
        self.calls += 1
        att, acache = self._attend(x)
        y = x + att
        fcache = None
        if self.ffn is not None:
            f, fcache = self.ffn.forward(y)
            y = y + f
        return y, (acache, fcache)

    def backward(self, cache, dy):
        acache, fcache = cache
        dres = dy
        if self.ffn is not None:
            dres = dy + self.ffn.backward(fcache, dy)
        cq, ck, cv, co, q, k, v, p = acache
        da = self.o.backward(co, dres)
        dp = da @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(p, -1, -2) @ da
        dscores = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dscores /= math.sqrt(self.d)
        dq = dscores @ k
        dk = np.swapaxes(dscores, -1, -2) @ q
        dx = dres + self.q.backward(cq, dq) + self.k.backward(ck, dk) + self.v.backward(cv, dv)
        return dx


# --------------------------------------------------------------------------
# losses

def softmax_ce(logits, target):
    """Mean cross-entropy over all leading positions.

    ``logits`` is ``[..., C]`` and ``target`` an integer array of the leading
    shape. Returns ``(loss, dlogits)``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    target = np.asarray(target)
    C = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ConfigError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= C):
        raise ValueError(f"target index out of range [0, {C})")
    flat = logits.reshape(-1, C)
    t = target.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    n = flat.shape[0]
    loss = float(np.mean(logz - z[np.arange(n), t]))
    grad = np.exp(z - logz[:, None])
    grad[np.arange(n), t] -= 1.0
    return loss, (grad / n).reshape(logits.shape)


def mse(pred, target):
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ConfigError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


# --------------------------------------------------------------------------
# optimizer

def lr_at(step: int, peak_lr: float, warmup: int, total: int, min_ratio: float = 0.0) -> float:
    """Linear warmup then cosine decay; ``step`` counts from 0."""
    if warmup > 0 and step < warmup:
        return peak_lr * (step + 1) / warmup
    if total <= warmup:
        return peak_lr
    frac = min(1.0, (step - warmup) / max(1, total - warmup))
    return peak_lr * (min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup: int = 100
    total_steps: int = 1000
    min_lr_ratio: float = 0.0
    grad_clip: float = 0.0


class Adam:
    """AdamW with warmup + cosine decay over a ParamStore."""

    def __init__(self, store: ParamStore, config: AdamConfig | None = None):
        self.store = store
        self.cfg = config or AdamConfig()
        if self.cfg.lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.m = {k: np.zeros_like(v) for k, v in store.values.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.values.items()}
        self.t = 0

    def current_lr(self) -> float:
        c = self.cfg
        return lr_at(self.t, c.lr, c.warmup, c.total_steps, c.min_lr_ratio)

    def step(self):
        c = self.cfg
        for k, g in self.store.grads.items():
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient in {k!r} at step {self.t}")
        scale = 1.0
        if c.grad_clip > 0:
            norm = math.sqrt(sum(float((g ** 2).sum()) for g in self.store.grads.values()))
            if norm > c.grad_clip:
                scale = c.grad_clip / norm
        lr = self.current_lr()
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for k, p in self.store.values.items():
            g = self.store.grads[k] * scale
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if c.weight_decay and p.ndim >= 2:
                p -= lr * c.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


# --------------------------------------------------------------------------
# finite differences

def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    # the floor keeps gradients that are exactly zero (a key bias under softmax
    # shift invariance, say) from turning round-off into a huge ratio
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_store_gradients(loss_fn, store: ParamStore, h: float = 1e-5) -> float:
    """Compare ``store.grads`` (already filled by one backward pass) to central
    differences of ``loss_fn()`` over every parameter. Returns max rel error."""
    worst = 0.0
    for name in store.names():
        analytic = store.grads[name].copy()
        numeric = numerical_grad(loss_fn, store.values[name], h)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst


# --------------------------------------------------------------------------
# checkpoints
#
# Layout: ASCII manifest lines, then raw little-endian float64 data.
#   HPCKPT 1
#   config_hash <hex>
#   param <name> <dim0>x<dim1>...      (one per parameter, in data order;
#                                        scalar shape written as "scalar")
#   data <total_float_count>
#   <8 * total bytes of '<f8' values>

CKPT_MAGIC = "HPCKPT 1"


def save_checkpoint(path, store: ParamStore, config_hash: str = "", extra: dict | None = None):
    lines = [CKPT_MAGIC, f"config_hash {config_hash or '-'}"]
    for key, val in (extra or {}).items():
        lines.append(f"meta {key} {val}")
    for name, v in store.values.items():
        shape = "x".join(str(s) for s in v.shape) if v.ndim else "scalar"
        lines.append(f"param {name} {shape}")
    total = store.num_params()
    lines.append(f"data {total}")
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = store.flat().astype("<f8").tobytes()
    Path(path).write_bytes(header + payload)


def load_checkpoint(path) -> tuple[ParamStore, str, dict]:
    raw = Path(path).read_bytes()
    store = ParamStore()
    pos = 0
    shapes = []
    config_hash = ""
    meta = {}

    def next_line():
        nonlocal pos
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        return line

    try:
        if next_line() != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        while True:
            parts = next_line().split(" ")
            if parts[0] == "config_hash":
                config_hash = "" if parts[1] == "-" else parts[1]
            elif parts[0] == "meta":
                meta[parts[1]] = " ".join(parts[2:])
            elif parts[0] == "param":
                shape = () if parts[2] == "scalar" else tuple(int(s) for s in parts[2].split("x"))
                shapes.append((parts[1], shape))
            elif parts[0] == "data":
                total = int(parts[1])
                break
            else:
                raise ValueError(f"{path}: unknown manifest line {parts!r}")
    except (ValueError, IndexError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path}: malformed checkpoint manifest: {exc}") from None
    if len(raw) - pos != 8 * total:
        raise ValueError(f"{path}: expected {total} floats, found {(len(raw) - pos) / 8}")
    data = np.frombuffer(raw, dtype="<f8", count=total, offset=pos).astype(DTYPE)
    off = 0
    for name, shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        store.add(name, data[off:off + n].reshape(shape))
        off += n
    return store, config_hash, meta


def assign_params(dst: ParamStore, src: ParamStore):
    """Copy values from ``src`` into a freshly built ``dst`` of the same layout."""
    if dst.names() != src.names():
        raise ConfigError("checkpoint parameter layout does not match model")
    for k in dst.names():
        if dst[k].shape != src[k].shape:
            raise ConfigError(f"shape mismatch for {k}: {dst[k].shape} vs {src[k].shape}")
        dst.values[k][...] = src[k]


__all__ = [
    "DTYPE", "ConfigError", "TrainingError", "make_rng", "spawn_rngs", "ParamStore",
    "gelu", "gelu_grad", "Linear", "MLP", "AttentionBlock", "softmax", "softmax_ce",
    "mse", "lr_at", "AdamConfig", "Adam", "numerical_grad", "max_rel_error",
    "check_store_gradients", "save_checkpoint", "load_checkpoint", "assign_params",
]
