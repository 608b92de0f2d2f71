"""Iterative mask-predict generation.

Generation starts from an all-mask sequence. Each step predicts clean
tokens at every free position, scores each position by the log-probability
of its current prediction (Gumbel-perturbed when enabled, so the chosen
token and its rank come from the same perturbed vector), commits the
top-k_t scores for the step's target count, and re-masks the rest.
Previously committed positions are re-scored with fresh predictions each
step, so commitments can be revoked. Observed template positions never
enter the schedule and are emitted verbatim.

The number of committed positions per step follows a denoising schedule
(linear by default); the final step commits everything, so the output
never contains mask tokens. Per-step randomness is drawn from
counter-based streams, making every sample a pure function of the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser, body_log_probs
from .process import TokenSequence
from .rng import stream
from .vocab import Vocab


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 500
    temperature: float = 1.0
    strategy: str = "stochastic"  # stochastic | greedy
    gumbel_perturb: bool = True
    unmask_schedule: str = "linear"  # linear | cosine
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.strategy not in ("stochastic", "greedy"):
            raise ValueError(f"unknown strategy {self.strategy}")
        if self.unmask_schedule not in ("linear", "cosine"):
            raise ValueError(f"unknown unmask schedule {self.unmask_schedule}")


@dataclass(frozen=True)
class InfillTemplate:
    """Partial-sequence constraint: observed positions carry tokens, free
    positions carry the mask id."""

    ids: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))
        object.__setattr__(self, "observed", np.asarray(self.observed, dtype=bool))
        if self.ids.shape != self.observed.shape:
            raise ValueError("template ids and observed mask must align")
        if not (~self.observed).any():
            raise ValueError("template has no free positions")

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])

    @classmethod
    def from_str(cls, text: str, vocab: Vocab) -> "InfillTemplate":
        ids = np.array(vocab.encode(text), dtype=np.int64)
        observed = ids != vocab.mask_id
        if np.any(np.isin(ids[observed], np.array(vocab.special_ids))):
            raise ValueError("observed template tokens must be non-special")
        return cls(ids=ids, observed=observed)

    @classmethod
    def all_free(cls, length: int, vocab: Vocab) -> "InfillTemplate":
        if length < 1:
            raise ValueError("length must be >= 1")
        return cls(ids=np.full(length, vocab.mask_id, dtype=np.int64), observed=np.zeros(length, dtype=bool))


def unmask_counts(L_free: int, steps: int, schedule_kind: str = "linear") -> np.ndarray:
    """Cumulative committed-position counts k_1..k_steps (nondecreasing,
    last entry = L_free)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if L_free < 1:
        raise ValueError("need at least one free position")
    j = np.arange(1, steps + 1, dtype=np.float64)
    if schedule_kind == "linear":
        frac = j / steps
    elif schedule_kind == "cosine":
        frac = 1.0 - np.cos(0.5 * math.pi * j / steps)
    else:
        raise ValueError(f"unknown unmask schedule {schedule_kind}")
    counts = np.ceil(L_free * frac).astype(np.int64)
    counts[-1] = L_free
    return np.maximum.accumulate(counts)


def gumbel_perturb(log_probs: np.ndarray, rng) -> np.ndarray:
    """Add standard Gumbel noise g = -log(-log U), U ~ (0, 1]."""
    u = 1.0 - rng.random(np.shape(log_probs))  # (0, 1]
    g = -np.log(-np.log(u))
    return log_probs + g


@dataclass
class SampleTrace:
    committed_per_step: list[int] = field(default_factory=list)
    remask_events: int = 0


def _step_choose(logp: np.ndarray, cfg: SamplerConfig, rng):
    """Pick a clean-token prediction and its score per position.

    logp: (L, V) body log-probabilities (specials at -inf).
    Returns (tokens (L,), scores (L,)).
    """
    if cfg.strategy == "greedy":
        tokens = logp.argmax(axis=-1)
        scores = np.take_along_axis(logp, tokens[:, None], axis=-1)[:, 0]
        return tokens, scores
    if cfg.gumbel_perturb:
        perturbed = gumbel_perturb(logp, rng)
        tokens = perturbed.argmax(axis=-1)
        scores = np.take_along_axis(perturbed, tokens[:, None], axis=-1)[:, 0]
        return tokens, scores
    # plain categorical draw; score is the unperturbed log-probability
    probs = np.exp(logp)
    u = rng.random(logp.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    tokens = (u[:, None] > cdf).sum(axis=1).clip(0, logp.shape[1] - 1)
    scores = np.take_along_axis(logp, tokens[:, None], axis=-1)[:, 0]
    return tokens, scores


def sample_loop(
    template: InfillTemplate,
    model: Denoiser,
    config: SamplerConfig,
    cond=None,
    logits_hook=None,
    trace: SampleTrace | None = None,
) -> TokenSequence:
    """Shared mask-predict loop behind sample / infill / guided generation.

    logits_hook(logits, ids, step) may rewrite the raw logits each step
    (classifier guidance and classifier-free mixing plug in here).
    """
    vocab = model.vocab
    free = ~template.observed
    L_free = int(free.sum())
    counts = unmask_counts(L_free, config.steps, config.unmask_schedule)
    ids = template.ids.copy()
    committed = np.zeros(template.length, dtype=bool)
    free_idx = np.flatnonzero(free)
    t_arg = None

    for step_i, k in enumerate(counts):
        if model.config.time_conditioning:
            # map the remaining-step fraction onto the schedule index range
            t_arg = max(1, round((1.0 - (step_i + 1) / config.steps) * (model.config.time_slots - 1)))
        logits = model.forward(ids, cond=cond, t=t_arg)
        if logits_hook is not None:
            logits = logits_hook(logits, ids, step_i)
        logp = body_log_probs(logits, vocab, config.temperature)
        rng = stream(config.seed, "sample-step", step_i)
        tokens, scores = _step_choose(logp[free_idx], config, rng)
        order = np.argsort(scores, kind="stable")[::-1]
        keep = free_idx[order[: int(k)]]
        new_committed = np.zeros_like(committed)
        new_committed[keep] = True
        if trace is not None:
            trace.committed_per_step.append(int(k))
            trace.remask_events += int((committed & ~new_committed).sum())
        # committed survivors keep their token; fresh tokens enter only at
        # previously-masked positions, conditioned on the current context
        reveal = new_committed & (ids == vocab.mask_id)
        ids[free_idx[~np.isin(free_idx, keep)]] = vocab.mask_id
        ids[reveal] = tokens[np.searchsorted(free_idx, np.flatnonzero(reveal))]
        committed = new_committed

    assert not np.any(ids == vocab.mask_id), "sampler terminated with masks left"
    return TokenSequence(ids=ids)


def sample(length: int, model: Denoiser, config: SamplerConfig, cond=None) -> TokenSequence:
    """Draw a fresh sequence of exactly the requested length."""
    return sample_loop(InfillTemplate.all_free(length, model.vocab), model, config, cond=cond)


def infill(template: InfillTemplate, model: Denoiser, config: SamplerConfig, cond=None) -> TokenSequence:
    """Fill the free positions of a template; observed positions are verbatim."""
    return sample_loop(template, model, config, cond=cond)


def greedy_decode(template: InfillTemplate, model: Denoiser, config: SamplerConfig | None = None, cond=None) -> TokenSequence:
    """Argmax decoding: no sampling anywhere, independent of the seed."""
    base = config or SamplerConfig()
    import dataclasses

    cfg = dataclasses.replace(base, strategy="greedy", gumbel_perturb=False)
    return sample_loop(template, model, cfg, cond=cond)
