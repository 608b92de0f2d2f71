"""Training objectives and the two-stage training loop.

The diffusion objective draws a timestep per sequence, corrupts it with
the forward process, and scores a reweighted cross-entropy on the noised
positions: weight(t) * sum_i b_i * -log p(x0_i | x_t), normalized by the
number of noised positions in the batch. The masked-LM objective is the
fixed-ratio, unit-weight special case. The draft-conditioned objective
corrupts a draft sequence instead of the clean one (indicator taken
against the draft) while still scoring recovery of the clean tokens.

Edge rule shared by all of them: if a drawn corruption noises zero
positions, redraw once; if still empty, force one uniformly chosen
position to noise. This guarantees a gradient signal at tiny noise levels
and makes the masked-LM case an exact distributional match of the
fixed-timestep diffusion case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser, body_log_probs
from .nn import AdamW, clip_global_norm, log_softmax, softmax
from .process import TokenSequence, corrupt
from .rng import stream
from .schedule import MixtureConstants, NoiseSchedule, Stationary

__all__ = [
    "TrainConfig",
    "LossReport",
    "NonFiniteLossError",
    "diffusion_loss",
    "mlm_loss",
    "draft_conditioned_loss",
    "weighted_masked_ce",
    "pseudo_perplexity",
    "masked_token_accuracy",
    "train",
    "tune_adapter",
]


class NonFiniteLossError(RuntimeError):
    def __init__(self, batch_id):
        super().__init__(f"non-finite loss at batch {batch_id}")
        self.batch_id = batch_id


@dataclass
class TrainConfig:
    stage: str = "two_stage"  # mlm | diffusion | two_stage
    mlm_steps: int = 2000
    diffusion_steps: int = 8000
    batch_size: int = 32
    learning_rate: float = 1e-3
    grad_clip_norm: float = 1.0
    mlm_mask_ratio: float = 0.15
    weight_decay: float = 0.01
    seed: int = 0
    eval_interval: int = 500

    def __post_init__(self):
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if not 0.0 < self.mlm_mask_ratio < 1.0:
            raise ValueError("mlm_mask_ratio must lie in (0, 1)")
        if self.stage not in ("mlm", "diffusion", "two_stage"):
            raise ValueError(f"unknown stage {self.stage}")

    def stage_plan(self) -> list[tuple[str, int]]:
        if self.stage == "mlm":
            return [("mlm", self.mlm_steps)]
        if self.stage == "diffusion":
            return [("diffusion", self.diffusion_steps)]
        return [("mlm", self.mlm_steps), ("diffusion", self.diffusion_steps)]


@dataclass
class LossReport:
    loss: float
    weighted_ce_by_t: dict[int, float]
    accuracy: float
    noised_count: int
    grad_norm: float | None = None


def _as_items(x0) -> list[tuple[int, TokenSequence]]:
    """Normalize input to [(seq_key, TokenSequence)]; lone sequences get key 0."""
    if isinstance(x0, TokenSequence):
        return [(0, x0)]
    items = []
    for entry in x0:
        if isinstance(entry, TokenSequence):
            items.append((len(items), entry))
        else:
            key, seq = entry
            items.append((int(key), seq))
    return items


def _force_one_noised(ids: np.ndarray, x0_ids: np.ndarray, eligible: np.ndarray, schedule, rs) -> np.ndarray:
    """Corrupt one uniformly chosen eligible position in place; returns its index."""
    pos = int(rs.integers(0, int(eligible.sum())))
    idx = np.flatnonzero(eligible)[pos]
    if schedule.stationary is Stationary.ABSORBING:
        ids[idx] = schedule.vocab.mask_id
    else:
        amino = [a for a in schedule.vocab.amino_ids if a != x0_ids[idx]]
        ids[idx] = amino[int(rs.integers(0, len(amino)))]
    return idx


def weighted_masked_ce(
    model: Denoiser,
    x0_ids: np.ndarray,
    xt_ids: np.ndarray,
    pattern: np.ndarray,
    weights: np.ndarray,
    cond=None,
    t=None,
    train: bool = False,
    rng=None,
    compute_grads: bool = False,
) -> tuple[float, float, dict[int, float]]:
    """Core scorer shared by every objective.

    loss = sum_b weights[b] * sum_l pattern[b,l] * ce[b,l] / pattern.sum().
    Returns (loss, accuracy-on-pattern, per-sequence weighted mean ce).
    """
    B, L = x0_ids.shape
    n = int(pattern.sum())
    if n == 0:
        return 0.0, float("nan"), {}
    logits, ctx = model.forward_with_ctx(xt_ids, cond=cond, t=t, train=train, rng=rng)
    logp = log_softmax(logits)
    ce = -np.take_along_axis(logp, x0_ids[..., None], axis=-1)[..., 0]
    per_seq = (ce * pattern).sum(axis=1)
    loss = float((weights * per_seq).sum() / n)
    pred = logits.argmax(axis=-1)
    acc = float((pred == x0_ids)[pattern].mean())
    if compute_grads:
        probs = softmax(logits)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, x0_ids[..., None], 1.0, axis=-1)
        dlogits = (probs - onehot) * (pattern[..., None] * weights[:, None, None] / n)
        model.backward_from_logits(dlogits, ctx)
    per_seq_mean = {
        b: float(weights[b] * per_seq[b] / max(int(pattern[b].sum()), 1)) for b in range(B)
    }
    return loss, acc, per_seq_mean


def _corrupt_batch(items, t_per_seq, schedule, rng_seed):
    """Corrupt every sequence at its own timestep, applying the redraw/force rule."""
    B = len(items)
    L = items[0][1].length
    x0_ids = np.stack([seq.ids for _, seq in items])
    xt_ids = np.empty_like(x0_ids)
    pattern = np.zeros((B, L), dtype=bool)
    for b, (key, seq) in enumerate(items):
        t = int(t_per_seq[b])
        noised = corrupt(seq, t, schedule, rng_seed, seq_key=key)
        if not noised.noised.any():
            noised = corrupt(seq, t, schedule, rng_seed, seq_key=key, attempt=1)
        ids = noised.ids.copy()
        pat = ids != seq.ids
        if not pat.any():
            eligible = ~np.isin(seq.ids, np.array(schedule.vocab.special_ids))
            _force_one_noised(ids, seq.ids, eligible, schedule, stream(rng_seed, "force", key, t))
            pat = ids != seq.ids
        xt_ids[b] = ids
        pattern[b] = pat
    return x0_ids, xt_ids, pattern


def diffusion_loss(
    x0,
    model: Denoiser,
    schedule: NoiseSchedule,
    constants: MixtureConstants,
    rng_seed: int,
    cond=None,
    forced_t: int | None = None,
    unit_weight: bool = False,
    train: bool = False,
    compute_grads: bool = False,
) -> LossReport:
    """Reweighted cross-entropy diffusion objective (timestep drawn per sequence)."""
    items = _as_items(x0)
    specials = np.array(schedule.vocab.special_ids)
    for _, seq in items:
        if seq.length == 0 or np.isin(seq.ids, specials).all():
            raise ValueError("all-special sequence has no trainable positions")
    T = schedule.T
    if forced_t is not None:
        t_per_seq = [forced_t] * len(items)
    else:
        t_per_seq = [int(stream(rng_seed, "t", key).integers(1, T + 1)) for key, _ in items]
        # redraw t (and its corruption) once if the first draw noised nothing
        x0_ids, xt_ids, pattern = _corrupt_batch(items, t_per_seq, schedule, rng_seed)
        for b, (key, seq) in enumerate(items):
            if not pattern[b].any():
                t_per_seq[b] = int(stream(rng_seed, "t", key, 1).integers(1, T + 1))
    x0_ids, xt_ids, pattern = _corrupt_batch(items, t_per_seq, schedule, rng_seed)
    weights = np.array(
        [1.0 if unit_weight else constants.weight_at(t) for t in t_per_seq]
    )
    t_arg = np.array(t_per_seq) if model.config.time_conditioning else None
    rng = stream(rng_seed, "dropout") if train else None
    loss, acc, per_seq = weighted_masked_ce(
        model, x0_ids, xt_ids, pattern, weights, cond=cond, t=t_arg,
        train=train, rng=rng, compute_grads=compute_grads,
    )
    by_t: dict[int, float] = {}
    for b, t in enumerate(t_per_seq):
        by_t.setdefault(int(t), 0.0)
        by_t[int(t)] += per_seq.get(b, 0.0)
    return LossReport(loss=loss, weighted_ce_by_t=by_t, accuracy=acc, noised_count=int(pattern.sum()))


def mlm_loss(
    x0,
    model: Denoiser,
    mask_ratio: float,
    rng_seed: int,
    train: bool = False,
    compute_grads: bool = False,
) -> LossReport:
    """Fixed-ratio masked-LM objective: Bernoulli masking, unit weight."""
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in (0, 1)")
    items = _as_items(x0)
    vocab = model.vocab
    specials = np.array(vocab.special_ids)
    B = len(items)
    L = items[0][1].length
    x0_ids = np.stack([seq.ids for _, seq in items])
    xt_ids = x0_ids.copy()
    pattern = np.zeros((B, L), dtype=bool)
    for b, (key, seq) in enumerate(items):
        eligible = ~np.isin(seq.ids, specials)
        pat = eligible & (stream(rng_seed, "mlm-mask", key).random(L) < mask_ratio)
        if not pat.any():
            pat = eligible & (stream(rng_seed, "mlm-mask", key, 1).random(L) < mask_ratio)
        if not pat.any():
            pos = np.flatnonzero(eligible)
            pick = pos[int(stream(rng_seed, "mlm-force", key).integers(0, pos.size))]
            pat[pick] = True
        xt_ids[b, pat] = vocab.mask_id
        pattern[b] = pat
    weights = np.ones(B)
    rng = stream(rng_seed, "dropout") if train else None
    loss, acc, per_seq = weighted_masked_ce(
        model, x0_ids, xt_ids, pattern, weights, train=train, rng=rng, compute_grads=compute_grads
    )
    return LossReport(loss=loss, weighted_ce_by_t={0: sum(per_seq.values())}, accuracy=acc, noised_count=int(pattern.sum()))


def draft_conditioned_loss(
    x0,
    draft,
    model: Denoiser,
    cond,
    schedule: NoiseSchedule,
    constants: MixtureConstants,
    rng_seed: int,
    train: bool = False,
    compute_grads: bool = False,
) -> LossReport:
    """Diffusion objective with the corruption applied to a draft sequence.

    The noised input and the noise indicator come from the draft; the
    cross-entropy target is still the clean sequence x0.
    """
    if model.adapter is None:
        raise ValueError("draft-conditioned training requires an attached adapter")
    x0_items = _as_items(x0)
    draft_items = _as_items(draft)
    for (_, a), (_, d) in zip(x0_items, draft_items):
        if a.length != d.length:
            raise ValueError("draft length does not match the clean sequence")
    # keys follow the clean items so draft == x0 reproduces diffusion_loss exactly
    draft_items = [(key, d) for (key, _), (_, d) in zip(x0_items, draft_items)]
    T = schedule.T
    t_per_seq = [int(stream(rng_seed, "t", key).integers(1, T + 1)) for key, _ in x0_items]
    _, xt_ids, pattern = _corrupt_batch(draft_items, t_per_seq, schedule, rng_seed)
    for b, (key, _) in enumerate(x0_items):
        if not pattern[b].any():
            t_per_seq[b] = int(stream(rng_seed, "t", key, 1).integers(1, T + 1))
    _, xt_ids, pattern = _corrupt_batch(draft_items, t_per_seq, schedule, rng_seed)
    x0_ids = np.stack([seq.ids for _, seq in x0_items])
    weights = np.array([constants.weight_at(t) for t in t_per_seq])
    rng = stream(rng_seed, "dropout") if train else None
    loss, acc, per_seq = weighted_masked_ce(
        model, x0_ids, xt_ids, pattern, weights, cond=cond, train=train, rng=rng,
        compute_grads=compute_grads,
    )
    by_t: dict[int, float] = {}
    for b, t in enumerate(t_per_seq):
        by_t[int(t)] = by_t.get(int(t), 0.0) + per_seq.get(b, 0.0)
    return LossReport(loss=loss, weighted_ce_by_t=by_t, accuracy=acc, noised_count=int(pattern.sum()))


def pseudo_perplexity(x: TokenSequence, model: Denoiser, batch: int = 64) -> float:
    """exp of the mean masked-position cross-entropy, masking one position
    at a time (specials excluded from the prediction support)."""
    L = x.length
    if L < 1:
        raise ValueError("pseudo-perplexity needs a non-empty sequence")
    total = 0.0
    t = 0 if model.config.time_conditioning else None
    for start in range(0, L, batch):
        rows = range(start, min(start + batch, L))
        ids = np.tile(x.ids, (len(rows), 1))
        for r, i in enumerate(rows):
            ids[r, i] = model.vocab.mask_id
        logits = model.forward(ids, t=t)
        logp = body_log_probs(logits, model.vocab)
        for r, i in enumerate(rows):
            total += -float(logp[r, i, x.ids[i]])
    return math.exp(total / L)


def masked_token_accuracy(model: Denoiser, seqs, mask_ratio: float, rng_seed: int) -> float:
    """Held-out masked-token accuracy at a fixed masking ratio."""
    correct = 0
    count = 0
    t = 1 if model.config.time_conditioning else None
    for key, seq in _as_items(seqs):
        eligible = ~np.isin(seq.ids, np.array(model.vocab.special_ids))
        pat = eligible & (stream(rng_seed, "eval-mask", key).random(seq.length) < mask_ratio)
        if not pat.any():
            continue
        ids = seq.ids.copy()
        ids[pat] = model.vocab.mask_id
        logits = model.forward(ids, t=t)
        logp = body_log_probs(logits, model.vocab)
        pred = logp.argmax(axis=-1)
        correct += int((pred[pat] == seq.ids[pat]).sum())
        count += int(pat.sum())
    return correct / max(count, 1)


def _bucket_by_length(seqs: list[TokenSequence]) -> dict[int, list[int]]:
    buckets: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        buckets.setdefault(s.length, []).append(i)
    return buckets


def train(
    corpus,
    config: TrainConfig,
    model: Denoiser,
    schedule: NoiseSchedule,
    constants: MixtureConstants | None = None,
    eval_seqs=None,
    log_fn=None,
    start_step: int = 0,
    optimizer: AdamW | None = None,
):
    """Run the configured stages over the corpus. Returns (model, metrics list).

    Batches are drawn from same-length buckets so no padding is needed.
    Gradients are clipped to config.grad_clip_norm every step; the pre-clip
    norm is logged. A non-finite loss aborts with the offending batch id.
    """
    from .schedule import mixture_constants as _mk

    seqs = [seq for _, seq in _as_items(corpus)]
    if not seqs:
        raise ValueError("empty corpus")
    constants = constants if constants is not None else _mk(schedule)
    buckets = _bucket_by_length(seqs)
    lengths = sorted(buckets)
    counts = np.array([len(buckets[l]) for l in lengths], dtype=float)
    bucket_p = counts / counts.sum()

    plan = config.stage_plan()
    total_steps = sum(n for _, n in plan)
    if optimizer is None:
        optimizer = AdamW(
            model.store,
            lr=config.learning_rate,
            weight_decay=config.weight_decay,
            warmup_steps=max(1, total_steps // 100),
        )
    metrics: list[dict] = []
    step = start_step
    done_before = min(start_step, total_steps)

    flat_plan: list[str] = []
    for stage, n in plan:
        flat_plan.extend([stage] * n)
    for stage in flat_plan[done_before:]:
        bi = int(stream(config.seed, "bucket", step).choice(len(lengths), p=bucket_p))
        pool = buckets[lengths[bi]]
        pick = stream(config.seed, "batch", step).integers(0, len(pool), size=min(config.batch_size, len(pool)))
        items = [(pool[i], seqs[pool[i]]) for i in pick]
        model.store.zero_grads()
        if stage == "mlm":
            report = mlm_loss(items, model, config.mlm_mask_ratio, rng_seed=config.seed + step, train=True, compute_grads=True)
        else:
            report = diffusion_loss(items, model, schedule, constants, rng_seed=config.seed + step, train=True, compute_grads=True)
        if not math.isfinite(report.loss):
            raise NonFiniteLossError(step)
        grad_norm = clip_global_norm(model.store, config.grad_clip_norm)
        optimizer.step()
        step += 1
        record = {
            "step": step,
            "stage": stage,
            "loss": report.loss,
            "acc": report.accuracy,
            "grad_norm": grad_norm,
            "pppl": None,
        }
        if eval_seqs and step % config.eval_interval == 0:
            record["eval_acc"] = masked_token_accuracy(model, eval_seqs, config.mlm_mask_ratio, rng_seed=config.seed)
            sample = _as_items(eval_seqs)[0][1]
            record["pppl"] = pseudo_perplexity(sample, model)
        metrics.append(record)
        if log_fn is not None:
            log_fn(record)
    return model, metrics


def tune_adapter(
    pairs,
    model: Denoiser,
    schedule: NoiseSchedule,
    constants: MixtureConstants,
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-3,
    grad_clip_norm: float = 1.0,
    seed: int = 0,
    use_draft: bool = False,
):
    """Fine-tune an attached adapter on (x0, cond) or (x0, cond, draft) tuples.

    All tuples must share one length. With use_draft, the corruption is
    applied to the draft sequence instead of the clean one.
    """
    if model.adapter is None:
        raise ValueError("attach an adapter before tuning it")
    optimizer = AdamW(model.store, lr=lr, weight_decay=0.0, warmup_steps=max(1, steps // 100))
    history = []
    for step in range(steps):
        pick = stream(seed, "adapter-batch", step).integers(0, len(pairs), size=batch_size)
        batch = [pairs[i] for i in pick]
        items = [(int(i), entry[0]) for i, entry in zip(pick, batch)]
        conds = [entry[1] for entry in batch]
        model.store.zero_grads()
        if use_draft:
            drafts = [(int(i), entry[2]) for i, entry in zip(pick, batch)]
            report = draft_conditioned_loss(
                items, drafts, model, conds, schedule, constants,
                rng_seed=seed + step, train=True, compute_grads=True,
            )
        else:
            report = diffusion_loss(
                items, model, schedule, constants, rng_seed=seed + step,
                cond=conds, train=True, compute_grads=True,
            )
        if not math.isfinite(report.loss):
            raise NonFiniteLossError(step)
        grad_norm = clip_global_norm(model.store, grad_clip_norm)
        optimizer.step()
        history.append({"step": step + 1, "loss": report.loss, "acc": report.accuracy, "grad_norm": grad_norm})
    return model, history
