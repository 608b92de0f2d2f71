"""Minimal neural-net layers in numpy with explicit backward passes.

Parameters live in a flat name -> array store (float64). Each layer's
forward stashes what its backward needs in a per-call ctx dict, so one
forward/backward pair per call context; gradients accumulate into
``store.grads``. Everything is verified against central finite
differences in the test suite.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ParamStore:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])
        self.trainable[name] = trainable
        return self.params[name]

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def trainable_names(self) -> list[str]:
        return [n for n in sorted(self.params) if self.trainable[n]]

    def n_params(self, trainable_only: bool = False) -> int:
        names = self.trainable_names() if trainable_only else sorted(self.params)
        return int(sum(self.params[n].size for n in names))


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / SQRT2)) + x * np.exp(-0.5 * x * x) * INV_SQRT_2PI


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


class Dense:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng, zero_init: bool = False, std: float | None = None):
        self.name = name
        std = 1.0 / math.sqrt(d_in) if std is None else std  # fan-in scaling
        w = np.zeros((d_in, d_out)) if zero_init else rng.normal(0.0, std, (d_in, d_out))
        store.add(f"{name}.w", w)
        store.add(f"{name}.b", np.zeros(d_out))
        self.store = store

    def __call__(self, x: np.ndarray, ctx: dict) -> np.ndarray:
        ctx[self.name] = x
        return x @ self.store.params[f"{self.name}.w"] + self.store.params[f"{self.name}.b"]

    def backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        x = ctx[self.name]
        flat_x = x.reshape(-1, x.shape[-1])
        flat_dy = dy.reshape(-1, dy.shape[-1])
        self.store.grads[f"{self.name}.w"] += flat_x.T @ flat_dy
        self.store.grads[f"{self.name}.b"] += flat_dy.sum(axis=0)
        return dy @ self.store.params[f"{self.name}.w"].T


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int, eps: float = 1e-6):
        self.name = name
        self.eps = eps
        store.add(f"{name}.g", np.ones(d))
        store.add(f"{name}.b", np.zeros(d))
        self.store = store

    def __call__(self, x: np.ndarray, ctx: dict) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        ctx[self.name] = (xhat, inv)
        return xhat * self.store.params[f"{self.name}.g"] + self.store.params[f"{self.name}.b"]

    def backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        xhat, inv = ctx[self.name]
        g = self.store.params[f"{self.name}.g"]
        self.store.grads[f"{self.name}.g"] += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        self.store.grads[f"{self.name}.b"] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
        dxhat = dy * g
        d = xhat.shape[-1]
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


class Rotary:
    """Pairwise rotation positional encoding applied to attention q/k."""

    def __init__(self, head_dim: int, max_len: int, base: float = 10000.0):
        if head_dim % 2:
            raise ValueError("rotary needs an even head dimension")
        inv_freq = base ** (-np.arange(0, head_dim, 2) / head_dim)
        angles = np.arange(max_len)[:, None] * inv_freq[None, :]
        self.cos = np.cos(angles)  # (max_len, head_dim/2)
        self.sin = np.sin(angles)

    def apply(self, x: np.ndarray) -> np.ndarray:
        # x: (B, L, H, dh)
        L = x.shape[1]
        c, s = self.cos[:L][None, :, None, :], self.sin[:L][None, :, None, :]
        x1, x2 = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = x1 * c - x2 * s
        out[..., 1::2] = x1 * s + x2 * c
        return out

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        # the rotation is orthogonal: gradient flows through its transpose
        L = x.shape[1]
        c, s = self.cos[:L][None, :, None, :], self.sin[:L][None, :, None, :]
        x1, x2 = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = x1 * c + x2 * s
        out[..., 1::2] = -x1 * s + x2 * c
        return out


class Attention:
    """Multi-head attention; self-attention when kv inputs equal the query
    input, cross-attention otherwise. Bidirectional (no causal mask)."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        d_model: int,
        n_heads: int,
        rng,
        d_kv: int | None = None,
        rotary: Rotary | None = None,
        kv_rotary: Rotary | None = None,
        zero_out: bool = False,
    ):
        if d_model % n_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        self.name = name
        self.h = n_heads
        self.dh = d_model // n_heads
        d_kv = d_kv if d_kv is not None else d_model
        self.q = Dense(store, f"{name}.q", d_model, d_model, rng)
        self.k = Dense(store, f"{name}.k", d_kv, d_model, rng)
        self.v = Dense(store, f"{name}.v", d_kv, d_model, rng)
        self.o = Dense(store, f"{name}.o", d_model, d_model, rng, zero_init=zero_out)
        self.rotary = rotary
        self.kv_rotary = kv_rotary

    def _split(self, x):
        B, L, _ = x.shape
        return x.reshape(B, L, self.h, self.dh)

    def __call__(self, x: np.ndarray, kv: np.ndarray, ctx: dict, key_mask: np.ndarray | None = None) -> np.ndarray:
        B, L, _ = x.shape
        q = self._split(self.q(x, ctx))
        k = self._split(self.k(kv, ctx))
        v = self._split(self.v(kv, ctx))
        if self.rotary is not None:
            q = self.rotary.apply(q)
        if self.kv_rotary is not None:
            k = self.kv_rotary.apply(k)
        scores = np.einsum("blhd,bmhd->bhlm", q, k) / math.sqrt(self.dh)
        if key_mask is not None:
            scores = np.where(key_mask[:, None, None, :], scores, -np.inf)
        attn = softmax(scores, axis=-1)
        mix = np.einsum("bhlm,bmhd->blhd", attn, v)
        ctx[self.name] = (q, k, v, attn)
        return self.o(mix.reshape(B, L, -1), ctx)

    def backward(self, dy: np.ndarray, ctx: dict) -> tuple[np.ndarray, np.ndarray]:
        q, k, v, attn = ctx[self.name]
        B, L = q.shape[0], q.shape[1]
        dmix = self.o.backward(dy, ctx).reshape(B, L, self.h, self.dh)
        dattn = np.einsum("blhd,bmhd->bhlm", dmix, v)
        dv = np.einsum("bhlm,blhd->bmhd", attn, dmix)
        dscores = softmax_backward(attn, dattn) / math.sqrt(self.dh)
        dq = np.einsum("bhlm,bmhd->blhd", dscores, k)
        dk = np.einsum("bhlm,blhd->bmhd", dscores, q)
        if self.rotary is not None:
            dq = self.rotary.apply_inverse(dq)
        if self.kv_rotary is not None:
            dk = self.kv_rotary.apply_inverse(dk)
        dx = self.q.backward(dq.reshape(B, L, -1), ctx)
        M = dk.shape[1]
        dkv = self.k.backward(dk.reshape(B, M, -1), ctx)
        dkv += self.v.backward(dv.reshape(B, M, -1), ctx)
        return dx, dkv


class FeedForward:
    def __init__(self, store: ParamStore, name: str, d_model: int, d_hidden: int, rng, zero_out: bool = False):
        self.name = name
        self.up = Dense(store, f"{name}.up", d_model, d_hidden, rng)
        self.down = Dense(store, f"{name}.down", d_hidden, d_model, rng, zero_init=zero_out)

    def __call__(self, x: np.ndarray, ctx: dict) -> np.ndarray:
        h = self.up(x, ctx)
        ctx[f"{self.name}.act"] = h
        return self.down(gelu(h), ctx)

    def backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        h = ctx[f"{self.name}.act"]
        dh = self.down.backward(dy, ctx) * gelu_grad(h)
        return self.up.backward(dh, ctx)


class Dropout:
    def __init__(self, rate: float):
        self.rate = rate

    def __call__(self, x: np.ndarray, ctx: dict, name: str, rng=None, train: bool = False) -> np.ndarray:
        if not train or self.rate <= 0.0:
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        ctx[name] = keep
        return x * keep

    def backward(self, dy: np.ndarray, ctx: dict, name: str) -> np.ndarray:
        keep = ctx.get(name)
        return dy if keep is None else dy * keep


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Scale trainable grads so their global L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    names = store.trainable_names()
    for n in names:
        total += float((store.grads[n] ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for n in names:
            store.grads[n] *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay and linear warmup to a constant rate."""

    def __init__(
        self,
        store: ParamStore,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        warmup_steps: int = 0,
    ):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.warmup = warmup_steps
        self.step_count = 0
        self.m = {n: np.zeros_like(p) for n, p in store.params.items()}
        self.v = {n: np.zeros_like(p) for n, p in store.params.items()}

    def current_lr(self) -> float:
        if self.warmup > 0 and self.step_count < self.warmup:
            return self.lr * (self.step_count + 1) / self.warmup
        return self.lr

    def step(self) -> None:
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        for n in self.store.trainable_names():
            g = self.store.grads[n]
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            mhat = self.m[n] / (1 - self.b1**t)
            vhat = self.v[n] / (1 - self.b2**t)
            p = self.store.params[n]
            if self.wd > 0.0 and not n.endswith(".b") and not n.endswith(".g"):
                p -= lr * self.wd * p
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)
