"""Bidirectional transformer denoiser p(x0 | x_t).

Pre-LN transformer over token ids producing per-position logits over the
vocabulary, with weight tying between the input embedding and the output
projection. An optional cross-attention adapter (attached after the last
layer, zero-initialized output projections) reads a condition embedding;
attaching it freezes the backbone. Under absorbing diffusion the noise
level is implicit in the mask count, so timestep conditioning is off by
default; a learned timestep embedding is available behind a flag for the
uniform stationary, where t is not inferable from the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Attention, Dense, Dropout, FeedForward, LayerNorm, ParamStore, Rotary
from .rng import stream
from .vocab import Vocab


@dataclass(frozen=True)
class DenoiserConfig:
    num_layers: int = 4
    num_heads: int = 4
    embed_dim: int = 128
    ffn_dim: int = 512
    max_len: int = 256
    dropout_rate: float = 0.0
    positional_scheme: str = "rotary"  # rotary | learned
    time_conditioning: bool = False
    time_slots: int = 0  # timestep-embedding rows (schedule T + 1) when conditioning on t

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.positional_scheme not in ("rotary", "learned"):
            raise ValueError(f"unknown positional scheme {self.positional_scheme}")
        if self.time_conditioning and self.time_slots < 1:
            raise ValueError("time_conditioning requires time_slots >= 1")


@dataclass
class ConditionEmbedding:
    """Conditioner states (L_c x d_c) with a validity mask."""

    states: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise ValueError("condition embedding must be a non-empty L_c x d_c matrix")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("condition embedding must be finite")
        if self.mask is None:
            self.mask = np.ones(self.states.shape[0], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def dim(self) -> int:
        return int(self.states.shape[1])


class AdapterBlock:
    """Cross-attention + bottleneck feed-forward, residual and zero-initialized
    so that attaching it leaves the forward pass unchanged at step 0."""

    def __init__(self, store: ParamStore, d_model: int, n_heads: int, cond_dim: int, bottleneck: int, max_len: int, rng, rotary: bool):
        rot_q = Rotary(d_model // n_heads, max_len) if rotary else None
        rot_k = Rotary(d_model // n_heads, max_len) if rotary else None
        self.ln1 = LayerNorm(store, "adapter.ln1", d_model)
        self.xattn = Attention(
            store, "adapter.xattn", d_model, n_heads, rng,
            d_kv=cond_dim, rotary=rot_q, kv_rotary=rot_k, zero_out=True,
        )
        self.ln2 = LayerNorm(store, "adapter.ln2", d_model)
        self.ffn = FeedForward(store, "adapter.ffn", d_model, bottleneck, rng, zero_out=True)

    def __call__(self, x, cond_states, cond_mask, ctx):
        h = self.ln1(x, ctx)
        x = x + self.xattn(h, cond_states, ctx, key_mask=cond_mask)
        h = self.ln2(x, ctx)
        return x + self.ffn(h, ctx)

    def backward(self, dy, ctx):
        dffn = self.ffn.backward(dy, ctx)
        dy = dy + self.ln2.backward(dffn, ctx)
        dx_attn, _dcond = self.xattn.backward(dy, ctx)
        return dy + self.ln1.backward(dx_attn, ctx)


class TransformerLayer:
    def __init__(self, store, i, cfg: DenoiserConfig, rng, rotary):
        self.ln1 = LayerNorm(store, f"layer{i}.ln1", cfg.embed_dim)
        self.attn = Attention(store, f"layer{i}.attn", cfg.embed_dim, cfg.num_heads, rng, rotary=rotary)
        self.ln2 = LayerNorm(store, f"layer{i}.ln2", cfg.embed_dim)
        self.ffn = FeedForward(store, f"layer{i}.ffn", cfg.embed_dim, cfg.ffn_dim, rng)
        self.i = i

    def __call__(self, x, ctx, drop: Dropout, rng, train):
        h = self.ln1(x, ctx)
        a = drop(self.attn(h, h, ctx), ctx, f"layer{self.i}.drop1", rng, train)
        x = x + a
        h = self.ln2(x, ctx)
        f = drop(self.ffn(h, ctx), ctx, f"layer{self.i}.drop2", rng, train)
        return x + f

    def backward(self, dy, ctx, drop: Dropout):
        df = drop.backward(dy, ctx, f"layer{self.i}.drop2")
        dy = dy + self.ln2.backward(self.ffn.backward(df, ctx), ctx)
        da = drop.backward(dy, ctx, f"layer{self.i}.drop1")
        dx, dkv = self.attn.backward(da, ctx)
        return dy + self.ln1.backward(dx + dkv, ctx)


class Denoiser:
    def __init__(self, config: DenoiserConfig, vocab: Vocab, seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.store = ParamStore()
        rng = stream(seed, "init")
        d = config.embed_dim
        self.store.add("embed", rng.normal(0.0, 1.0, (vocab.size, d)))
        self.store.add("out.b", np.zeros(vocab.size))
        if config.positional_scheme == "learned":
            self.store.add("pos", rng.normal(0.0, 1.0, (config.max_len, d)))
            rotary = None
        else:
            rotary = Rotary(d // config.num_heads, config.max_len)
        if config.time_conditioning:
            self.store.add("time_embed", rng.normal(0.0, 1.0, (config.time_slots, d)))
        self.layers = [TransformerLayer(self.store, i, config, rng, rotary) for i in range(config.num_layers)]
        self.final_ln = LayerNorm(self.store, "final_ln", d)
        self.drop = Dropout(config.dropout_rate)
        self.adapter: AdapterBlock | None = None
        self.adapter_cond_dim: int | None = None

    # -- adapter ---------------------------------------------------------

    def attach_adapter(self, cond_dim: int, bottleneck: int | None = None, seed: int = 1) -> "Denoiser":
        """Insert one adapter block after the last layer; freeze the backbone."""
        if self.adapter is not None:
            raise ValueError("adapter already attached")
        for name in self.store.params:
            self.store.trainable[name] = False
        rng = stream(seed, "adapter-init")
        bottleneck = bottleneck or max(8, self.config.embed_dim // 2)
        self.adapter = AdapterBlock(
            self.store, self.config.embed_dim, self.config.num_heads, cond_dim,
            bottleneck, self.config.max_len, rng,
            rotary=self.config.positional_scheme == "rotary",
        )
        self.adapter_cond_dim = cond_dim
        return self

    # -- forward / backward ----------------------------------------------

    @staticmethod
    def _as_batch(ids) -> tuple[np.ndarray, bool]:
        arr = np.asarray(getattr(ids, "ids", ids), dtype=np.int64)
        if arr.ndim == 1:
            return arr[None, :], True
        return arr, False

    def _stack_cond(self, cond, batch: int):
        if cond is None:
            return None, None
        conds = cond if isinstance(cond, (list, tuple)) else [cond] * batch
        if len(conds) != batch:
            raise ValueError("condition batch size mismatch")
        states = np.stack([c.states for c in conds])
        mask = np.stack([c.mask for c in conds])
        return states, mask

    def _forward(self, ids, cond=None, t=None, train: bool = False, rng=None):
        x_ids, _ = self._as_batch(ids)
        B, L = x_ids.shape
        if L > self.config.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        if cond is not None and self.adapter is None:
            raise ValueError("condition provided but no adapter attached")
        ctx: dict = {"ids": x_ids}
        x = self.store.params["embed"][x_ids]
        if self.config.positional_scheme == "learned":
            x = x + self.store.params["pos"][:L][None]
        if self.config.time_conditioning:
            if t is None:
                raise ValueError("model is time-conditioned; pass t")
            t_arr = np.full(B, t, dtype=np.int64) if np.isscalar(t) else np.asarray(t, dtype=np.int64)
            ctx["t"] = t_arr
            x = x + self.store.params["time_embed"][t_arr][:, None, :]
        x = self.drop(x, ctx, "drop.embed", rng, train)
        for layer in self.layers:
            x = layer(x, ctx, self.drop, rng, train)
        if self.adapter is not None and cond is not None:
            cs, cm = self._stack_cond(cond, B)
            x = self.adapter(x, cs, cm, ctx)
        h = self.final_ln(x, ctx)
        logits = h @ self.store.params["embed"].T + self.store.params["out.b"]
        ctx["hidden"] = h
        return logits, ctx

    def forward(self, ids, cond=None, t=None, mode: str = "eval", rng=None) -> np.ndarray:
        """Per-position logits, shape (L, V) for a single sequence or (B, L, V)."""
        _, single = self._as_batch(ids)
        logits, _ = self._forward(ids, cond=cond, t=t, train=(mode == "train"), rng=rng)
        return logits[0] if single else logits

    def forward_with_ctx(self, ids, cond=None, t=None, train=True, rng=None):
        return self._forward(ids, cond=cond, t=t, train=train, rng=rng)

    def backward_from_logits(self, dlogits: np.ndarray, ctx: dict) -> None:
        """Accumulate parameter gradients given d(loss)/d(logits)."""
        E = self.store.params["embed"]
        h = ctx["hidden"]
        flat_dl = dlogits.reshape(-1, dlogits.shape[-1])
        flat_h = h.reshape(-1, h.shape[-1])
        self.store.grads["embed"] += flat_dl.T @ flat_h
        self.store.grads["out.b"] += flat_dl.sum(axis=0)
        dx = self.final_ln.backward(dlogits @ E, ctx)
        if self.adapter is not None and "adapter.xattn" in ctx:
            dx = self.adapter.backward(dx, ctx)
        for layer in reversed(self.layers):
            dx = layer.backward(dx, ctx, self.drop)
        dx = self.drop.backward(dx, ctx, "drop.embed")
        if self.config.time_conditioning and "t" in ctx:
            np.add.at(self.store.grads["time_embed"], ctx["t"], dx.sum(axis=1))
        if self.config.positional_scheme == "learned":
            L = dx.shape[1]
            self.store.grads["pos"][:L] += dx.sum(axis=0)
        np.add.at(self.store.grads["embed"], ctx["ids"], dx)

    # -- representation ----------------------------------------------------

    def embed(self, ids) -> np.ndarray:
        """Final hidden states (L x d) for a clean sequence at zero noise."""
        arr, single = self._as_batch(ids)
        if np.any(arr == self.vocab.mask_id):
            raise ValueError("embed requires a clean sequence (mask token present)")
        t = 0 if self.config.time_conditioning else None
        _, ctx = self._forward(arr, t=t)
        h = ctx["hidden"]
        return h[0] if single else h

    # -- introspection ------------------------------------------------------

    def trainable_fraction(self) -> float:
        return self.store.n_params(trainable_only=True) / self.store.n_params()

    def clone_params(self) -> dict[str, np.ndarray]:
        return {n: p.copy() for n, p in self.store.params.items()}


def body_log_probs(logits: np.ndarray, vocab: Vocab, temperature: float = 1.0) -> np.ndarray:
    """Log-softmax over the vocabulary with special tokens masked to -inf,
    after dividing logits by the temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.array(logits, dtype=np.float64) / temperature
    z[..., list(vocab.special_ids)] = -np.inf
    z = z - z.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
