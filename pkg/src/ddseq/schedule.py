"""Diffusion noise schedules and the derived backward-mixture constants.

The forward corruption of a single token follows the kernel
``beta_t * x_prev + (1 - beta_t) * q_noise`` with closed-form marginal
``alpha_t * x0 + (1 - alpha_t) * q_noise`` where ``alpha_t`` is the
cumulative keep-probability. The stationary distribution ``q_noise`` is
either a point mass on the mask token (absorbing) or uniform over the
non-special tokens (uniform); specials carry zero noise mass and are
never corrupted.

The backward transition, conditioned on whether the corrupted token still
equals the clean one, is an exact two-component mixture with scalar
coefficients ``lambda1`` (keep branch) and ``lambda2`` (reveal branch).
Those coefficients are derived here from alpha/beta alone; the test-side
enumeration oracle independently checks that the mixture reproduces the
exact Bayes posterior entrywise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .vocab import Vocab


class Stationary(enum.Enum):
    ABSORBING = "absorbing"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray  # alpha_0..alpha_T, keep-probabilities
    beta: np.ndarray  # beta_1..beta_T, beta[t-1] = alpha_t / alpha_{t-1}
    stationary: Stationary
    q_noise: np.ndarray  # stationary probability vector over the vocab
    vocab: Vocab
    kind: str = "linear"

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[t])

    def beta_at(self, t: int) -> float:
        """beta_t for 1 <= t <= T."""
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return float(self.beta[t - 1])

    @property
    def q_star(self) -> float:
        """Stationary mass on any single non-special token."""
        return float(self.q_noise[self.vocab.amino_ids[0]])


def stationary_vector(vocab: Vocab, stationary: Stationary) -> np.ndarray:
    q = np.zeros(vocab.size)
    if stationary is Stationary.ABSORBING:
        q[vocab.mask_id] = 1.0
    else:
        amino = list(vocab.amino_ids)
        q[amino] = 1.0 / len(amino)
    return q


def linear_schedule(
    T: int, stationary: Stationary = Stationary.ABSORBING, vocab: Vocab | None = None
) -> NoiseSchedule:
    """Linear keep-probability schedule alpha_t = 1 - t/T (alpha_T = 0 exactly)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if vocab is None:
        from .vocab import build_vocab

        vocab = build_vocab()
    t = np.arange(T + 1, dtype=np.float64)
    alpha = 1.0 - t / T
    alpha[-1] = 0.0
    beta = np.empty(T, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = alpha[1:] / alpha[:-1]
    beta[~np.isfinite(beta)] = 0.0
    return NoiseSchedule(
        T=T,
        alpha=alpha,
        beta=beta,
        stationary=stationary,
        q_noise=stationary_vector(vocab, stationary),
        vocab=vocab,
        kind="linear",
    )


@dataclass(frozen=True)
class MixtureConstants:
    """Backward-mixture coefficients, indexed so that entry t-1 belongs to
    the transition from t to t-1. ``loss_weight[t-1]`` is the per-timestep
    cross-entropy weight, equal to ``lambda2[t-1]``."""

    lambda1: np.ndarray  # lambda1_{t-1} for t = 1..T
    lambda2: np.ndarray  # lambda2_{t-1} for t = 1..T
    loss_weight: np.ndarray

    def weight_at(self, t: int) -> float:
        """Loss weight for timestep t (1-based)."""
        return float(self.loss_weight[t - 1])


def mixture_constants(schedule: NoiseSchedule) -> MixtureConstants:
    """Derive lambda1/lambda2 so the two-branch mixture equals the Bayes
    posterior of the forward process.

    With q* the stationary mass on a single body token:

      keep branch  (x_t == x0): lambda1 = 1 - (1-beta_t)(1-alpha_{t-1}) q* / (alpha_t + (1-alpha_t) q*)
      reveal branch (x_t != x0): lambda2 = (p_reveal - (1-beta_t) q*) / (1 - (1-beta_t) q*)
      with p_reveal = (1-beta_t)(alpha_{t-1} + (1-alpha_{t-1}) q*) / (1-alpha_t)

    Under the absorbing stationary (q* = 0) these reduce to lambda1 = 1 and
    lambda2 = (alpha_{t-1} - alpha_t) / (1 - alpha_t).
    """
    a = schedule.alpha
    if np.any(a[1:] >= a[:-1]):
        raise ValueError("schedule has a zero-noise step (alpha_t >= alpha_{t-1}); lambda2 is ill-defined")
    qs = schedule.q_star
    T = schedule.T
    lam1 = np.empty(T, dtype=np.float64)
    lam2 = np.empty(T, dtype=np.float64)
    for t in range(1, T + 1):
        a_prev, a_t = a[t - 1], a[t]
        b_t = schedule.beta_at(t)
        if qs == 0.0:
            lam1[t - 1] = 1.0  # absorbing: a surviving token pins its past
        else:
            lam1[t - 1] = 1.0 - ((1.0 - b_t) * (1.0 - a_prev) * qs) / (a_t + (1.0 - a_t) * qs)
        p_reveal = (1.0 - b_t) * (a_prev + (1.0 - a_prev) * qs) / (1.0 - a_t)
        lam2[t - 1] = (p_reveal - (1.0 - b_t) * qs) / (1.0 - (1.0 - b_t) * qs)
    lam1 = np.clip(lam1, 0.0, 1.0)
    lam2 = np.clip(lam2, 0.0, 1.0)
    return MixtureConstants(lambda1=lam1, lambda2=lam2, loss_weight=lam2.copy())
