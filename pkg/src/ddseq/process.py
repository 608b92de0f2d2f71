"""Forward corruption process and the stochastic backward transition.

corrupt() applies the closed-form marginal: each body position keeps the
clean token with probability alpha_t, otherwise draws from the stationary
distribution. posterior_step() samples x_{t-1} from the exact backward
mixture given x_t and a clean-sequence estimate, routing every position
through one of two branches:

  x_t == x0hat: keep x_t with prob lambda1, else draw from q_noise
  x_t != x0hat: reveal x0hat with prob lambda2, else draw from
                q_noise(x_t) = beta_t * x_t + (1 - beta_t) * q_noise

Branch bookkeeping for the corruption indicator b follows the reading
consistent with the mixture derivation: a position counts as noised after
the step iff its branch drew the noise component (kept-clean or revealed
positions count as clean). Under the absorbing stationary this coincides
with "token == mask". The alternative reading, where b is re-derived by
literal comparison with x0hat, differs only under the uniform stationary
when a noise draw coincides with x0hat by chance; the stored indicator is
the event-based one, and clean-vs-corrupted training indicators are
always computed literally against the clean sequence (see training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import stream
from .schedule import MixtureConstants, NoiseSchedule
from .vocab import Vocab


@dataclass(frozen=True)
class TokenSequence:
    """A clean sequence of token ids (no mask token present)."""

    ids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])

    def validate(self, vocab: Vocab) -> "TokenSequence":
        if self.length and (self.ids.min() < 0 or self.ids.max() >= vocab.size):
            raise ValueError("token id out of range")
        if np.any(self.ids == vocab.mask_id):
            raise ValueError("mask token inside a clean sequence")
        return self

    @classmethod
    def from_str(cls, text: str, vocab: Vocab) -> "TokenSequence":
        return cls(np.array(vocab.encode(text), dtype=np.int64)).validate(vocab)


@dataclass(frozen=True)
class NoisedSequence:
    """A corrupted sequence at timestep t with per-position noise indicators."""

    ids: np.ndarray
    t: int
    noised: np.ndarray  # bool, b_i(t)

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))
        object.__setattr__(self, "noised", np.asarray(self.noised, dtype=bool))

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])


def marginal(x0_token: int, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Exact categorical q(x_t | x0) for a single non-special token."""
    vocab = schedule.vocab
    if vocab.is_special(int(x0_token)) or int(x0_token) == vocab.mask_id:
        raise ValueError("marginal is defined for body tokens only")
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside 0..{schedule.T}")
    a = schedule.alpha_at(t)
    p = (1.0 - a) * schedule.q_noise.copy()
    p[int(x0_token)] += a
    return p


def forward_kernel(xprev_token: int, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Single-step kernel q(x_t | x_{t-1}) = beta_t * x_prev + (1-beta_t) * q_noise."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside 1..{schedule.T}")
    b = schedule.beta_at(t)
    p = (1.0 - b) * schedule.q_noise.copy()
    p[int(xprev_token)] += b
    return p


def _draw_categorical(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Invert the CDF of `probs` at uniform draws u. probs is (V,) or (n, V)."""
    cdf = np.cumsum(probs, axis=-1)
    if cdf.ndim == 1:
        return np.searchsorted(cdf, u, side="right").clip(0, probs.shape[-1] - 1)
    idx = (u[:, None] > cdf).sum(axis=1)
    return idx.clip(0, probs.shape[-1] - 1)


def corrupt(
    x0: TokenSequence,
    t: int,
    schedule: NoiseSchedule,
    rng_seed: int,
    seq_key: int = 0,
    attempt: int = 0,
) -> NoisedSequence:
    """Sample x_t ~ q(. | x0). Specials are never corrupted. Deterministic
    given (rng_seed, seq_key, t, attempt)."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside 0..{schedule.T}")
    vocab = schedule.vocab
    L = x0.length
    ids = x0.ids.copy()
    noised = np.zeros(L, dtype=bool)
    if L == 0 or t == 0:
        return NoisedSequence(ids=ids, t=t, noised=noised)

    body = ~np.isin(ids, np.array(vocab.special_ids))
    rs = stream(rng_seed, "corrupt", seq_key, t, attempt)
    u = rs.random((L, 2))
    a = schedule.alpha_at(t)
    hit = body & (u[:, 0] >= a)
    if hit.any():
        draws = _draw_categorical(u[hit, 1], schedule.q_noise)
        ids[hit] = draws
    noised = hit & (ids != x0.ids)
    # Absorbing draws always land on mask, so the literal comparison above
    # equals the hit event; under uniform a draw may coincide with x0.
    return NoisedSequence(ids=ids, t=t, noised=noised)


def posterior_step(
    xt: NoisedSequence,
    x0hat: TokenSequence,
    schedule: NoiseSchedule,
    constants: MixtureConstants,
    rng_seed: int,
    seq_key: int = 0,
) -> NoisedSequence:
    """Sample x_{t-1} from the backward mixture given x_t and x0hat."""
    t = xt.t
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside 1..{schedule.T}")
    if xt.length != x0hat.length:
        raise ValueError("length mismatch between x_t and x0hat")
    vocab = schedule.vocab
    if np.any(x0hat.ids == vocab.mask_id) or np.any(
        np.isin(x0hat.ids, np.array(vocab.special_ids)) & ~np.isin(xt.ids, np.array(vocab.special_ids))
    ):
        raise ValueError("x0hat contains mask/special tokens at diffused positions")

    L = xt.length
    ids = xt.ids.copy()
    new_noised = xt.noised.copy()
    if L == 0:
        return NoisedSequence(ids=ids, t=t - 1, noised=new_noised)

    body = ~np.isin(xt.ids, np.array(vocab.special_ids)) | (xt.ids == vocab.mask_id)
    lam1 = float(constants.lambda1[t - 1])
    lam2 = float(constants.lambda2[t - 1])
    b_t = schedule.beta_at(t)

    rs = stream(rng_seed, "posterior", seq_key, t)
    u = rs.random((L, 2))

    same = (xt.ids == x0hat.ids) & body
    diff = (~same) & body

    # keep branch: retain x_t with prob lambda1, else q_noise
    renoise1 = same & (u[:, 0] >= lam1)
    if renoise1.any():
        ids[renoise1] = _draw_categorical(u[renoise1, 1], schedule.q_noise)
    new_noised[same] = renoise1[same]

    # reveal branch: emit x0hat with prob lambda2, else q_noise(x_t)
    reveal = diff & (u[:, 0] < lam2)
    ids[reveal] = x0hat.ids[reveal]
    new_noised[reveal] = False
    renoise2 = diff & ~reveal
    if renoise2.any():
        keep_xt = u[renoise2, 1] < b_t
        sub = np.where(renoise2)[0]
        stay = sub[keep_xt]
        move = sub[~keep_xt]
        ids[stay] = xt.ids[stay]
        if move.size:
            # reuse the residual uniform mass above beta_t for the q_noise draw
            u_resid = (u[move, 1] - b_t) / (1.0 - b_t)
            ids[move] = _draw_categorical(u_resid, schedule.q_noise)
        new_noised[renoise2] = True

    return NoisedSequence(ids=ids, t=t - 1, noised=new_noised)
