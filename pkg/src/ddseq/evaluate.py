"""Sequence-space evaluation metrics and the frozen-embedding linear probe.

Structure-based quality metrics need a folding model, which does not exist
at desk scale; grammar validity and sequence-identity analogs take their
place here (stated loudly in the README). Pairwise identity is computed
without alignment on equal-length strata because the sampler controls
length exactly.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize

from .grammar import SyntheticGrammar
from .process import TokenSequence
from .training import pseudo_perplexity


@dataclass
class EvalReport:
    n_samples: int
    grammar_validity: float | None
    distinct_n: dict[int, float]
    mean_pairwise_identity: float | None
    pseudo_perplexity_mean: float | None
    infill_exact_match: float | None = None
    annotation_match: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def distinct_ngrams(samples: list[TokenSequence], n: int) -> float:
    """Unique n-grams over total n-grams, pooled across samples."""
    seen = set()
    total = 0
    for s in samples:
        ids = s.ids
        for i in range(len(ids) - n + 1):
            seen.add(tuple(ids[i : i + n]))
            total += 1
    return len(seen) / total if total else 0.0


def mean_pairwise_identity(samples: list[TokenSequence]) -> float | None:
    """Mean per-position identity over all equal-length pairs."""
    by_len: dict[int, list[TokenSequence]] = {}
    for s in samples:
        by_len.setdefault(s.length, []).append(s)
    idents = []
    for group in by_len.values():
        for a, b in itertools.combinations(group, 2):
            idents.append(float((a.ids == b.ids).mean()))
    return float(np.mean(idents)) if idents else None


def evaluate(
    samples: list[TokenSequence],
    grammar: SyntheticGrammar | None = None,
    model=None,
    annotations_target=None,
    infill_reference=None,
    max_pppl_samples: int = 32,
) -> EvalReport:
    """Aggregate metrics for a sample set; pairwise metrics are reported as
    absent (None) below two samples rather than zero."""
    n = len(samples)
    validity = None
    if grammar is not None and n:
        validity = float(np.mean([grammar.is_valid(s) for s in samples]))
    dn = {k: distinct_ngrams(samples, k) for k in (1, 2, 3, 4)}
    mpi = mean_pairwise_identity(samples) if n >= 2 else None
    pppl = None
    if model is not None and n:
        subset = samples[:max_pppl_samples]
        pppl = float(np.mean([pseudo_perplexity(s, model) for s in subset]))
    ann_match = None
    if annotations_target is not None and grammar is not None and n:
        rates = []
        for s, y in zip(samples, annotations_target):
            rates.append(float((grammar.annotate(s) == np.asarray(y)).mean()))
        ann_match = float(np.mean(rates))
    infill_match = None
    if infill_reference is not None and n:
        rates = []
        for s, ref in zip(samples, infill_reference):
            rates.append(float(np.array_equal(s.ids, ref.ids)))
        infill_match = float(np.mean(rates))
    return EvalReport(
        n_samples=n,
        grammar_validity=validity,
        distinct_n=dn,
        mean_pairwise_identity=mpi,
        pseudo_perplexity_mean=pppl,
        infill_exact_match=infill_match,
        annotation_match=ann_match,
    )


def linear_probe(
    embeddings: np.ndarray,
    labels: np.ndarray,
    train_fraction: float = 0.8,
    seed: int = 0,
    l2: float = 1e-3,
) -> float:
    """Multinomial logistic probe on frozen per-position embeddings.

    embeddings: (N, d); labels: (N,) ints. Returns held-out accuracy.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes")
    n, d = X.shape
    C = int(classes.max()) + 1
    order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    cut = int(train_fraction * n)
    tr, te = order[:cut], order[cut:]
    mu, sd = X[tr].mean(axis=0), X[tr].std(axis=0) + 1e-8
    Xn = (X - mu) / sd

    def pack(w):
        return w.reshape(C, d + 1)

    def objective(wflat):
        W = pack(wflat)
        logits = Xn[tr] @ W[:, :d].T + W[:, d]
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        nll = -logp[np.arange(len(tr)), y[tr]].mean() + l2 * (W[:, :d] ** 2).sum()
        p = np.exp(logp)
        dlogits = p.copy()
        dlogits[np.arange(len(tr)), y[tr]] -= 1.0
        dlogits /= len(tr)
        dW = np.concatenate([dlogits.T @ Xn[tr] + 2 * l2 * W[:, :d], dlogits.sum(axis=0)[:, None]], axis=1)
        return nll, dW.ravel()

    res = minimize(objective, np.zeros(C * (d + 1)), jac=True, method="L-BFGS-B", options={"maxiter": 500})
    W = pack(res.x)
    pred = (Xn[te] @ W[:, :d].T + W[:, d]).argmax(axis=1)
    return float((pred == y[te]).mean())
