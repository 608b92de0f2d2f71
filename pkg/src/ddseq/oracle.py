"""Brute-force enumeration oracles for tiny instances.

Everything here is deliberately independent of the production kernels: the
forward marginal, Bayes posterior, variational-bound terms, and guided
reweighting are recomputed from first principles by exhaustive enumeration
in float64, so tests can compare the fast implementations against them.
Scaling stops at |support|^L <= 1e5 states by design.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .process import NoisedSequence, TokenSequence
from .schedule import MixtureConstants, NoiseSchedule, Stationary

MAX_STATES = 100_000

# A model, to the oracle, is any map from a full token-id vector to a
# (L, V) matrix of clean-token probabilities (rows sum to 1 on body tokens).
PredictFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class EnumeratedDistribution:
    """Exhaustive outcome -> probability map over full sequence states."""

    probs: dict[tuple[int, ...], float]

    def total(self) -> float:
        return math.fsum(self.probs.values())

    def prob(self, ids) -> float:
        return self.probs.get(tuple(int(i) for i in ids), 0.0)

    def check_normalized(self, tol: float = 1e-12) -> None:
        if abs(self.total() - 1.0) > tol:
            raise AssertionError(f"enumerated distribution sums to {self.total()}")


def support_tokens(schedule: NoiseSchedule) -> list[int]:
    """Tokens reachable by the forward process: body tokens, plus mask under absorbing."""
    toks = list(schedule.vocab.amino_ids)
    if schedule.stationary is Stationary.ABSORBING:
        toks.append(schedule.vocab.mask_id)
    return toks


def _check_size(n_tokens: int, length: int) -> None:
    if n_tokens**length > MAX_STATES:
        raise ValueError("enumeration support too large")


def _product_distribution(per_position: list[np.ndarray], tokens: list[int]) -> EnumeratedDistribution:
    probs: dict[tuple[int, ...], float] = {}
    for combo in itertools.product(range(len(tokens)), repeat=len(per_position)):
        p = 1.0
        for i, c in enumerate(combo):
            p *= per_position[i][c]
        if p > 0.0:
            probs[tuple(tokens[c] for c in combo)] = p
    return EnumeratedDistribution(probs)


def single_marginal(x0_token: int, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Per-token forward marginal recomputed from the kernel chain, not the
    closed form: multiplies the one-step kernel matrices for s = 1..t."""
    V = schedule.vocab.size
    dist = np.zeros(V)
    dist[int(x0_token)] = 1.0
    for s in range(1, t + 1):
        b = schedule.beta_at(s)
        dist = b * dist + (1.0 - b) * schedule.q_noise * dist.sum()
    return dist


def enumerate_forward(x0: TokenSequence, t: int, schedule: NoiseSchedule) -> EnumeratedDistribution:
    """Exact distribution of x_t given the clean sequence."""
    tokens = support_tokens(schedule)
    _check_size(len(tokens), x0.length)
    per_pos = []
    for tok in x0.ids:
        m = single_marginal(int(tok), t, schedule)
        per_pos.append(np.array([m[c] for c in tokens]))
    return _product_distribution(per_pos, tokens)


def posterior_position(
    xt_token: int, x0_token: int, t: int, schedule: NoiseSchedule
) -> np.ndarray:
    """Exact single-position Bayes posterior q(x_{t-1} | x_t, x0):
    proportional to kernel(x_{t-1} -> x_t) * marginal(x0 -> x_{t-1})."""
    V = schedule.vocab.size
    b = schedule.beta_at(t)
    marg_prev = single_marginal(int(x0_token), t - 1, schedule)
    post = np.zeros(V)
    for j in range(V):
        kern = b * (1.0 if j == int(xt_token) else 0.0) + (1.0 - b) * schedule.q_noise[int(xt_token)]
        post[j] = kern * marg_prev[j]
    z = post.sum()
    if z <= 0.0:
        raise ValueError(
            f"impossible combination: x_t={xt_token} unreachable from x0={x0_token} at t={t}"
        )
    return post / z


def enumerate_posterior(
    xt: NoisedSequence, x0: TokenSequence, t: int, schedule: NoiseSchedule
) -> EnumeratedDistribution:
    """Exact distribution of x_{t-1} given (x_t, x0), as a product over positions."""
    tokens = support_tokens(schedule)
    _check_size(len(tokens), x0.length)
    per_pos = []
    for i in range(x0.length):
        p = posterior_position(int(xt.ids[i]), int(x0.ids[i]), t, schedule)
        per_pos.append(np.array([p[c] for c in tokens]))
    return _product_distribution(per_pos, tokens)


def mixture_position(
    xt_token: int, x0_token: int, t: int, schedule: NoiseSchedule, constants: MixtureConstants
) -> np.ndarray:
    """The two-branch mixture distribution the production sampler draws from."""
    V = schedule.vocab.size
    lam1 = float(constants.lambda1[t - 1])
    lam2 = float(constants.lambda2[t - 1])
    out = np.zeros(V)
    if int(xt_token) == int(x0_token):
        out += (1.0 - lam1) * schedule.q_noise
        out[int(xt_token)] += lam1
    else:
        b = schedule.beta_at(t)
        qnoise_xt = (1.0 - b) * schedule.q_noise.copy()
        qnoise_xt[int(xt_token)] += b
        out += (1.0 - lam2) * qnoise_xt
        out[int(x0_token)] += lam2
    return out


def _kl(q: np.ndarray, p: np.ndarray) -> float:
    acc = 0.0
    for qi, pi in zip(q, p):
        if qi > 0.0:
            if pi <= 0.0:
                return math.inf
            acc += qi * math.log(qi / pi)
    return acc


@dataclass
class ElboReport:
    kl_form: np.ndarray  # per t = 1..T, KL terms enumerated over x_t and v
    ce_form: np.ndarray  # per t = 1..T, weighted cross-entropy form
    prior_kl: float
    neg_elbo: float  # sum of kl_form + prior_kl
    nll: float | None  # exact -log p(x0) of the reverse chain (absorbing only)


def exact_elbo_terms(
    x0: TokenSequence,
    predict: PredictFn,
    schedule: NoiseSchedule,
    constants: MixtureConstants,
) -> ElboReport:
    """Enumerate the variational bound exactly.

    For every t the loss term is computed two independent ways: (a) as the
    expectation over x_t and the per-position branch variables of explicit
    KL divergences between the true and model mixtures, and (b) as the
    reweighted cross-entropy sum(loss_weight * b_i * -log p(x0_i | x_t)).
    The two must agree to float64 accuracy. Also returns the exact NLL of
    the reverse chain under the absorbing stationary, where the branch is
    observable from x_t, so neg_elbo >= nll is a theorem to assert.
    """
    tokens = support_tokens(schedule)
    _check_size(len(tokens), max(x0.length, 1))
    T = schedule.T
    L = x0.length
    vocab = schedule.vocab
    kl_form = np.zeros(T)
    ce_form = np.zeros(T)

    for t in range(1, T + 1):
        fwd = enumerate_forward(x0, t, schedule)
        lam1 = float(constants.lambda1[t - 1])
        lam2 = float(constants.lambda2[t - 1])
        kl_t = 0.0
        ce_t = 0.0
        for state, p_state in fwd.probs.items():
            xt = np.array(state, dtype=np.int64)
            model_p = predict(xt)
            for i in range(L):
                b_i = int(xt[i]) != int(x0.ids[i])
                if not b_i:
                    # keep branch: q and model components coincide for both
                    # values of the Bernoulli variable, but evaluate the KLs
                    # literally rather than assuming zero.
                    q_keep = np.zeros(vocab.size)
                    q_keep[int(xt[i])] = 1.0
                    kl_t += p_state * (
                        lam1 * _kl(q_keep, q_keep)
                        + (1.0 - lam1) * _kl(schedule.q_noise, schedule.q_noise)
                    )
                else:
                    bt = schedule.beta_at(t)
                    qn_xt = (1.0 - bt) * schedule.q_noise.copy()
                    qn_xt[int(xt[i])] += bt
                    q_reveal = np.zeros(vocab.size)
                    q_reveal[int(x0.ids[i])] = 1.0
                    kl_t += p_state * (
                        lam2 * _kl(q_reveal, model_p[i])
                        + (1.0 - lam2) * _kl(qn_xt, qn_xt)
                    )
                    ce_t += p_state * constants.weight_at(t) * (-math.log(model_p[i][int(x0.ids[i])]))
        kl_form[t - 1] = kl_t
        ce_form[t - 1] = ce_t

    # prior gap at t = T
    fwd_T = enumerate_forward(x0, T, schedule)
    prior = _stationary_product(schedule, L)
    prior_kl = math.fsum(
        p * math.log(p / prior.prob(state)) for state, p in fwd_T.probs.items() if p > 0.0
    )

    nll = None
    if schedule.stationary is Stationary.ABSORBING:
        nll = -math.log(reverse_chain_likelihood(x0, predict, schedule, constants))
    neg_elbo = float(kl_form.sum() + prior_kl)
    return ElboReport(kl_form=kl_form, ce_form=ce_form, prior_kl=prior_kl, neg_elbo=neg_elbo, nll=nll)


def _stationary_product(schedule: NoiseSchedule, length: int) -> EnumeratedDistribution:
    tokens = support_tokens(schedule)
    per_pos = [np.array([schedule.q_noise[c] for c in tokens])] * length
    return _product_distribution(per_pos, tokens)


def reverse_chain_likelihood(
    x0: TokenSequence,
    predict: PredictFn,
    schedule: NoiseSchedule,
    constants: MixtureConstants,
) -> float:
    """Exact p(x0) of the generative reverse chain under absorbing diffusion.

    The chain starts from the all-mask state and at each step applies, per
    position, the branch-marginalized transition: masked positions reveal a
    model-predicted token with prob lambda2 (else stay masked), committed
    positions are kept with prob lambda1 (else re-masked). The branch is a
    function of x_t alone, so this is a well-defined Markov chain.
    """
    if schedule.stationary is not Stationary.ABSORBING:
        raise ValueError("reverse-chain enumeration requires the absorbing stationary")
    tokens = support_tokens(schedule)
    _check_size(len(tokens), x0.length)
    mask_id = schedule.vocab.mask_id
    L = x0.length
    states = [tuple(c) for c in itertools.product(tokens, repeat=L)]
    dist = {s: 0.0 for s in states}
    dist[tuple([mask_id] * L)] = 1.0

    for t in range(schedule.T, 0, -1):
        lam1 = float(constants.lambda1[t - 1])
        lam2 = float(constants.lambda2[t - 1])
        new = {s: 0.0 for s in states}
        for s, p_s in dist.items():
            if p_s == 0.0:
                continue
            xt = np.array(s, dtype=np.int64)
            model_p = predict(xt)
            per_pos = []
            for i in range(L):
                comp = np.zeros(len(tokens))
                if s[i] == mask_id:
                    for c, tok in enumerate(tokens):
                        if tok == mask_id:
                            comp[c] += 1.0 - lam2
                        else:
                            comp[c] += lam2 * model_p[i][tok]
                else:
                    for c, tok in enumerate(tokens):
                        if tok == s[i]:
                            comp[c] += lam1
                        if tok == mask_id:
                            comp[c] += 1.0 - lam1
                per_pos.append(comp)
            for combo in itertools.product(range(len(tokens)), repeat=L):
                p = p_s
                for i, c in enumerate(combo):
                    p *= per_pos[i][c]
                if p > 0.0:
                    new[tuple(tokens[c] for c in combo)] += p
        dist = new
    return dist[tuple(int(i) for i in x0.ids)]


def enumerate_guided(base: EnumeratedDistribution, g: np.ndarray, eta: float) -> EnumeratedDistribution:
    """Exact reweighting p(x) * exp(eta * sum_i g[i, x_i]) / Z."""
    weighted = {}
    for state, p in base.probs.items():
        s = sum(g[i, tok] for i, tok in enumerate(state))
        weighted[state] = p * math.exp(eta * s)
    z = math.fsum(weighted.values())
    return EnumeratedDistribution({s: w / z for s, w in weighted.items()})
