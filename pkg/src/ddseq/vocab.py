"""Token alphabet with special symbols.

The default alphabet is the 20 canonical amino acids plus four specials:
a mask/absorbing symbol [X], padding, and begin/end markers. Token ids are
dense 0..size-1, amino acids first, specials appended at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

AMINO_ACIDS = list("ACDEFGHIKLMNPQRSTVWY")

MASK = "[X]"
PAD = "[PAD]"
BOS = "[BOS]"
EOS = "[EOS]"
SPECIALS = [MASK, PAD, BOS, EOS]


@dataclass(frozen=True)
class Vocab:
    """Immutable token alphabet. Build with :func:`build_vocab`."""

    tokens: tuple[str, ...]
    mask_id: int
    index: dict[str, int] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(self.index[s] for s in SPECIALS)

    @property
    def amino_ids(self) -> tuple[int, ...]:
        """Ids of the non-special (sequence body) tokens."""
        special = set(self.special_ids)
        return tuple(i for i in range(self.size) if i not in special)

    def is_special(self, token_id: int) -> bool:
        return token_id in set(self.special_ids)

    def encode(self, text: str) -> list[int]:
        """Map a string of single-letter symbols to ids ('X' means mask)."""
        ids = []
        for ch in text:
            if ch == "X":
                ids.append(self.mask_id)
            elif ch in self.index:
                ids.append(self.index[ch])
            else:
                raise ValueError(f"unknown symbol {ch!r}")
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            tok = self.tokens[int(i)]
            out.append("X" if tok == MASK else tok)
        return "".join(out)


def build_vocab(alphabet_spec: list[str] | None = None) -> Vocab:
    """Build a Vocab from body symbols, appending any missing specials.

    Raises ValueError naming the first duplicate symbol.
    """
    symbols = list(alphabet_spec) if alphabet_spec is not None else list(AMINO_ACIDS)
    if not symbols:
        raise ValueError("alphabet_spec must be non-empty")
    seen = set()
    for s in symbols:
        if s in seen:
            raise ValueError(f"duplicate symbol {s}")
        seen.add(s)
    for s in SPECIALS:
        if s not in seen:
            symbols.append(s)
            seen.add(s)
    index = {s: i for i, s in enumerate(symbols)}
    return Vocab(tokens=tuple(symbols), mask_id=index[MASK], index=index)
