"""Plug-and-play conditioning at sampling time.

Classifier guidance tilts each step's clean-token logits by the input
gradient of a discriminator's log-likelihood for a target annotation,
evaluated at the current sequence state treated as a continuous one-hot
matrix (mask rows are the one-hot of the mask token, recomputed every
step). Classifier-free guidance mixes conditional and unconditional
logits affinely in log space. A small windowed sequence labeler over
relaxed one-hot input serves as the guidance model; it can be trained
noise-aware (on diffusion-corrupted inputs) so its gradients stay
informative at high noise levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import ConditionEmbedding, Denoiser
from .nn import AdamW, Dense, ParamStore, gelu, gelu_grad, log_softmax, softmax
from .process import TokenSequence, corrupt
from .rng import stream
from .sampling import InfillTemplate, SamplerConfig, SampleTrace, sample_loop
from .vocab import Vocab

SS3_LABELS = "HEC"


@dataclass(frozen=True)
class GuidanceConfig:
    mode: str = "classifier"  # classifier | classifier_free | none
    eta: float = 0.0
    cfg_eta: float = 1.0

    def __post_init__(self):
        if self.mode not in ("classifier", "classifier_free", "none"):
            raise ValueError(f"unknown guidance mode {self.mode}")
        if self.mode == "classifier" and not (np.isfinite(self.eta) and self.eta >= 0):
            raise ValueError("classifier guidance strength must be finite and >= 0")


def encode_annotation(text: str, labels: str = SS3_LABELS) -> np.ndarray:
    idx = {c: i for i, c in enumerate(labels)}
    try:
        return np.array([idx[c] for c in text], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"unknown label {e.args[0]!r}") from None


def decode_annotation(y: np.ndarray, labels: str = SS3_LABELS) -> str:
    return "".join(labels[int(i)] for i in y)


def one_hot(ids: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros((len(ids), size))
    out[np.arange(len(ids)), ids] = 1.0
    return out


def encode_labels(y: np.ndarray, num_classes: int = len(SS3_LABELS)) -> ConditionEmbedding:
    """Synthetic conditioner: per-position label one-hots as condition states."""
    return ConditionEmbedding(one_hot(np.asarray(y, dtype=np.int64), num_classes))


def encode_draft(draft: TokenSequence, vocab: Vocab) -> ConditionEmbedding:
    """Synthetic conditioner for draft sequences: token one-hots."""
    return ConditionEmbedding(one_hot(draft.ids, vocab.size))


class WindowLabeler:
    """Per-position classifier over a local window of relaxed one-hot input.

    forward: x (L, V) -> label logits (L, C) through an embedding matrix,
    a window concatenation, and one hidden GELU layer. Differentiable with
    respect to the input, which is what guidance consumes.
    """

    def __init__(self, vocab: Vocab, num_classes: int = len(SS3_LABELS), window: int = 2, embed_dim: int = 16, hidden: int = 64, seed: int = 0):
        self.vocab = vocab
        self.num_classes = num_classes
        self.window = window
        self.embed_dim = embed_dim
        self.store = ParamStore()
        rng = stream(seed, "labeler-init")
        self.store.add("embed", rng.normal(0.0, 0.1, (vocab.size, embed_dim)))
        span = (2 * window + 1) * embed_dim
        self.h1 = Dense(self.store, "h1", span, hidden, rng, std=0.1)
        self.out = Dense(self.store, "out", hidden, num_classes, rng, std=0.1)

    # -- plumbing ----------------------------------------------------------

    def _window_concat(self, emb: np.ndarray) -> np.ndarray:
        L, de = emb.shape
        w = self.window
        padded = np.zeros((L + 2 * w, de))
        padded[w : w + L] = emb
        return np.concatenate([padded[o : o + L] for o in range(2 * w + 1)], axis=1)

    def _window_scatter(self, dwin: np.ndarray, L: int) -> np.ndarray:
        de = self.embed_dim
        w = self.window
        dpad = np.zeros((L + 2 * w, de))
        for o in range(2 * w + 1):
            dpad[o : o + L] += dwin[:, o * de : (o + 1) * de]
        return dpad[w : w + L]

    def label_logits(self, x_relaxed: np.ndarray, ctx: dict | None = None) -> np.ndarray:
        ctx = ctx if ctx is not None else {}
        emb = x_relaxed @ self.store.params["embed"]
        win = self._window_concat(emb)
        pre = self.h1(win, ctx)
        ctx["pre"] = pre
        return self.out(gelu(pre), ctx)

    def predict(self, ids: np.ndarray) -> np.ndarray:
        """Label posteriors from token ids (identical to the one-hot path)."""
        return softmax(self.label_logits(one_hot(np.asarray(ids, dtype=np.int64), self.vocab.size)))

    # -- guidance interface --------------------------------------------------

    def value_and_grad(self, x_relaxed: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """log p(y | x) and its gradient with respect to the relaxed input."""
        x_relaxed = np.asarray(x_relaxed, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if x_relaxed.ndim != 2 or x_relaxed.shape[1] != self.vocab.size:
            raise ValueError("x_relaxed must be L x |V|")
        if x_relaxed.shape[0] != y.shape[0]:
            raise ValueError("annotation length does not match the sequence")
        self.store.zero_grads()  # parameter grads are a side effect here, discard
        ctx: dict = {}
        logits = self.label_logits(x_relaxed, ctx)
        logp = log_softmax(logits)
        value = float(logp[np.arange(len(y)), y].sum())
        dlogits = -softmax(logits)
        dlogits[np.arange(len(y)), y] += 1.0
        dh = self.out.backward(dlogits, ctx) * gelu_grad(ctx["pre"])
        dwin = self.h1.backward(dh, ctx)
        demb = self._window_scatter(dwin, x_relaxed.shape[0])
        dx = demb @ self.store.params["embed"].T
        if not np.all(np.isfinite(dx)):
            raise ValueError("non-finite guidance gradient")
        return value, dx

    def nll_and_param_grads(self, x_relaxed: np.ndarray, y: np.ndarray) -> float:
        """Mean label cross-entropy; accumulates parameter grads for training."""
        ctx: dict = {}
        logits = self.label_logits(x_relaxed, ctx)
        logp = log_softmax(logits)
        L = len(y)
        nll = float(-logp[np.arange(L), y].mean())
        dlogits = (softmax(logits) - one_hot(y, self.num_classes)) / L
        dh = self.out.backward(dlogits, ctx) * gelu_grad(ctx["pre"])
        dwin = self.h1.backward(dh, ctx)
        demb = self._window_scatter(dwin, L)
        self.store.grads["embed"] += x_relaxed.T @ demb
        return nll


def value_and_grad(gm, x_relaxed: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Evaluate a guidance model: scalar log-likelihood and L x |V| gradient."""
    return gm.value_and_grad(x_relaxed, y)


def guided_step_logits(base_logits: np.ndarray, g: np.ndarray, eta: float) -> np.ndarray:
    """Tilt per-position logits by eta * g before the downstream softmax."""
    if eta == 0.0:
        return base_logits
    if base_logits.shape != g.shape:
        raise ValueError("guidance gradient shape mismatch")
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite guidance gradient")
    return base_logits + eta * g


def cfg_combine(cond_logits: np.ndarray, uncond_logits: np.ndarray, cfg_eta: float) -> np.ndarray:
    """Affine log-space mix: cfg_eta * cond + (1 - cfg_eta) * uncond."""
    if cond_logits.shape != uncond_logits.shape:
        raise ValueError("logit shape mismatch")
    if cfg_eta == 1.0:
        return cond_logits
    if cfg_eta == 0.0:
        return uncond_logits
    return cfg_eta * cond_logits + (1.0 - cfg_eta) * uncond_logits


def train_ssp_classifier(
    labeled_corpus,
    noise_aware: bool = True,
    schedule=None,
    vocab: Vocab | None = None,
    num_classes: int = len(SS3_LABELS),
    steps: int = 2000,
    lr: float = 3e-3,
    seed: int = 0,
    window: int = 2,
) -> WindowLabeler:
    """Fit the windowed labeler on (TokenSequence, labels) pairs.

    With noise_aware, each training input is first corrupted at a random
    timestep of the given schedule, so the classifier sees mask tokens and
    stays calibrated along the sampling trajectory.
    """
    pairs = list(labeled_corpus)
    if not pairs:
        raise ValueError("empty labeled corpus")
    if noise_aware and schedule is None:
        raise ValueError("noise-aware training needs a schedule")
    vocab = vocab or (schedule.vocab if schedule is not None else None)
    if vocab is None:
        raise ValueError("pass a vocab (or a schedule carrying one)")
    gm = WindowLabeler(vocab, num_classes=num_classes, window=window, seed=seed)
    opt = AdamW(gm.store, lr=lr, weight_decay=0.0, warmup_steps=max(1, steps // 100))
    batch = 4
    for step in range(steps):
        picks = stream(seed, "ssp-pick", step).integers(0, len(pairs), size=batch)
        gm.store.zero_grads()
        for j, i in enumerate(picks):
            seq, labels = pairs[int(i)]
            ids = seq.ids
            if noise_aware:
                t = int(stream(seed, "ssp-t", step, j).integers(1, schedule.T + 1))
                ids = corrupt(seq, t, schedule, rng_seed=seed + step, seq_key=int(i)).ids
            gm.nll_and_param_grads(one_hot(ids, vocab.size), np.asarray(labels, dtype=np.int64))
        for name in gm.store.grads:
            gm.store.grads[name] /= batch
        opt.step()
    return gm


def guided_sample(
    length_or_template,
    model: Denoiser,
    gm,
    y: np.ndarray,
    config: SamplerConfig,
    guidance: GuidanceConfig | None = None,
    cond=None,
    trace: SampleTrace | None = None,
) -> TokenSequence:
    """Sampling loop with classifier guidance injected at every step."""
    guidance = guidance or GuidanceConfig(mode="classifier", eta=1.0)
    if isinstance(length_or_template, InfillTemplate):
        template = length_or_template
    else:
        template = InfillTemplate.all_free(int(length_or_template), model.vocab)
    y = np.asarray(y, dtype=np.int64)
    if y.shape[0] != template.length:
        raise ValueError("annotation length does not match the sample length")
    eta = guidance.eta if guidance.mode == "classifier" else 0.0

    def hook(logits, ids, step):
        if eta == 0.0:
            return logits
        _, g = gm.value_and_grad(one_hot(ids, model.vocab.size), y)
        return guided_step_logits(logits, g, eta)

    return sample_loop(template, model, config, cond=cond, logits_hook=hook, trace=trace)


def cfg_sample(
    length_or_template,
    model: Denoiser,
    cond,
    config: SamplerConfig,
    cfg_eta: float = 1.0,
    trace: SampleTrace | None = None,
) -> TokenSequence:
    """Classifier-free guided sampling for an adapter-conditioned model.

    The conditional branch runs the adapter on `cond`; the unconditional
    branch is the frozen backbone (the adapter is skipped when no
    condition is supplied), so both come from one set of weights.
    """
    if isinstance(length_or_template, InfillTemplate):
        template = length_or_template
    else:
        template = InfillTemplate.all_free(int(length_or_template), model.vocab)

    def hook(cond_logits, ids, step):
        if cfg_eta == 1.0:
            return cond_logits
        uncond = model.forward(ids)
        return cfg_combine(cond_logits, uncond, cfg_eta)

    return sample_loop(template, model, config, cond=cond, logits_hook=hook, trace=trace)
