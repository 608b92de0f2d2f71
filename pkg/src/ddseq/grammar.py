"""Synthetic first-order Markov grammars with per-position class labels.

These stand in for a real sequence corpus at desk scale. The default
grammar walks the amino-acid alphabet in three token classes (labelled
H/E/C like 3-state secondary structure): within a class, tokens follow a
near-deterministic cycle; classes exit only through C, so an H token
never directly follows an E token and vice versa. Labels are a
deterministic function of the token, and a sequence is grammatical iff
every adjacent pair has positive transition probability. A parity variant
alternates two disjoint token groups, so the class of a position is
determined by the class of either neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .process import TokenSequence
from .rng import stream
from .vocab import AMINO_ACIDS, Vocab, build_vocab


@dataclass
class SyntheticGrammar:
    vocab: Vocab
    transition: np.ndarray  # (V, V) row-stochastic over amino ids, zero elsewhere
    start: np.ndarray  # (V,) start distribution
    class_of: np.ndarray  # (V,) int label per token id, -1 for specials
    labels: str
    min_len: int = 24
    max_len: int = 48
    name: str = "grammar"

    def num_classes(self) -> int:
        return len(self.labels)

    # -- generation --------------------------------------------------------

    def sample_one(self, seed: int, key: int) -> tuple[TokenSequence, np.ndarray]:
        rs = stream(seed, "grammar", key)
        L = int(rs.integers(self.min_len, self.max_len + 1))
        ids = np.empty(L, dtype=np.int64)
        ids[0] = _draw(rs.random(), self.start)
        for i in range(1, L):
            ids[i] = _draw(rs.random(), self.transition[ids[i - 1]])
        return TokenSequence(ids), self.class_of[ids].copy()

    def annotate(self, seq: TokenSequence) -> np.ndarray:
        return self.class_of[seq.ids].copy()

    def annotation_str(self, seq: TokenSequence) -> str:
        return "".join(self.labels[c] for c in self.annotate(seq))

    # -- parsing -----------------------------------------------------------

    def is_valid(self, seq: TokenSequence) -> bool:
        ids = seq.ids
        if ids.size == 0:
            return False
        if np.any(self.class_of[ids] < 0):
            return False
        if self.start[ids[0]] <= 0.0:
            return False
        return bool(np.all(self.transition[ids[:-1], ids[1:]] > 0.0))


def _draw(u: float, probs: np.ndarray) -> int:
    return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1))


def _class_partition(vocab: Vocab, sizes: list[int]) -> list[list[int]]:
    amino = list(vocab.amino_ids)
    assert sum(sizes) == len(amino)
    out, at = [], 0
    for s in sizes:
        out.append(amino[at : at + s])
        at += s
    return out


def ss3_grammar(vocab: Vocab | None = None, continue_p: float = 0.90, min_len: int = 24, max_len: int = 48) -> SyntheticGrammar:
    """Three-class grammar (H/E/C) with block-level legality.

    Distribution: within a class, tokens follow a near-deterministic cycle
    (successor with probability continue_p), with small mass spread over
    the rest of the class and over exit classes. Legality is permissive at
    the class level: any same-class pair and any transition into an
    allowed class is grammatical, but an H token never directly borders an
    E token (H and E only exit through C). Every token pair therefore has
    a legal middle token, so partially committed sequences are always
    completable, while direct H-E junctions stay strictly forbidden.
    """
    vocab = vocab or build_vocab()
    V = vocab.size
    groups = _class_partition(vocab, [7, 7, 6])
    class_of = np.full(V, -1, dtype=np.int64)
    for c, grp in enumerate(groups):
        for tok in grp:
            class_of[tok] = c
    trans = np.zeros((V, V))
    exits = {0: [2], 1: [2], 2: [0, 1]}  # H->C, E->C, C->H|E
    # C exits twice as often as H/E do, balancing the stationary class
    # distribution to 1/3 each
    exit_p = {0: 1.0 - continue_p, 1: 1.0 - continue_p, 2: 2.0 * (1.0 - continue_p)}
    within_spread = 0.04
    for c, grp in enumerate(groups):
        exit_targets = [tok for e in exits[c] for tok in groups[e]]
        for i, tok in enumerate(grp):
            succ = grp[(i + 1) % len(grp)]
            stay = 1.0 - exit_p[c]
            trans[tok, succ] += stay - within_spread
            for other in grp:
                trans[tok, other] += within_spread / len(grp)
            for tgt in exit_targets:
                trans[tok, tgt] += exit_p[c] / len(exit_targets)
    start = np.zeros(V)
    for grp in groups:
        for tok in grp:
            start[tok] = (1.0 / len(groups)) / len(grp)
    return SyntheticGrammar(
        vocab=vocab, transition=trans, start=start, class_of=class_of,
        labels="HEC", min_len=min_len, max_len=max_len, name="ss3",
    )


def parity_grammar(vocab: Vocab | None = None, min_len: int = 24, max_len: int = 48) -> SyntheticGrammar:
    """Two alternating token groups: even positions draw from one class,
    odd positions from the other (relative to the start)."""
    vocab = vocab or build_vocab()
    V = vocab.size
    groups = _class_partition(vocab, [10, 10])
    class_of = np.full(V, -1, dtype=np.int64)
    for c, grp in enumerate(groups):
        for tok in grp:
            class_of[tok] = c
    trans = np.zeros((V, V))
    for c, grp in enumerate(groups):
        other = groups[1 - c]
        for tok in grp:
            trans[tok, other] = 1.0 / len(other)
    start = np.zeros(V)
    start[groups[0]] = 1.0 / len(groups[0])
    return SyntheticGrammar(
        vocab=vocab, transition=trans, start=start, class_of=class_of,
        labels="AB", min_len=min_len, max_len=max_len, name="parity",
    )


def generate_corpus(grammar: SyntheticGrammar, n: int, seed: int) -> list[tuple[TokenSequence, np.ndarray]]:
    """n i.i.d. labelled grammar samples, deterministic per seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [grammar.sample_one(seed, k) for k in range(n)]
