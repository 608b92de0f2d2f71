"""FASTA reading/writing with optional per-record annotation lines.

Round trips are byte-exact for the sequences this package emits. Records
may carry an aligned label string on a "#SS3 ..." comment line directly
after the sequence. Unknown residue letters follow a configurable policy:
reject (with the offending line number) or map to the mask symbol.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .process import TokenSequence
from .vocab import Vocab


@dataclass
class FastaRecord:
    name: str
    seq: TokenSequence
    annotation: str | None = None


class FastaError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def read_fasta(path, vocab: Vocab, on_unknown: str = "reject") -> list[FastaRecord]:
    """Parse a FASTA file into records of token sequences.

    on_unknown: 'reject' raises with the line number; 'mask' maps unknown
    residue letters to the mask token. Lowercase input is uppercased.
    """
    if on_unknown not in ("reject", "mask"):
        raise ValueError("on_unknown must be 'reject' or 'mask'")
    records: list[FastaRecord] = []
    name = None
    chunks: list[str] = []
    annotation: list[str] = []
    seq_line = 0

    def flush(line_no):
        if name is None:
            return
        text = "".join(chunks)
        if not text:
            raise FastaError(f"record {name!r} has no sequence", seq_line or line_no)
        ids = []
        for ch in text:
            if ch == "X" or ch in vocab.index:
                ids.append(vocab.mask_id if ch == "X" else vocab.index[ch])
            elif on_unknown == "mask":
                ids.append(vocab.mask_id)
            else:
                raise FastaError(f"illegal residue {ch!r} in record {name!r}", seq_line)
        ann = "".join(annotation) or None
        if ann is not None and len(ann) != len(ids):
            raise FastaError(f"annotation length {len(ann)} != sequence length {len(ids)}", seq_line)
        records.append(FastaRecord(name=name, seq=TokenSequence(np.array(ids, dtype=np.int64)), annotation=ann))

    with open(path, "r", encoding="ascii") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith(">"):
                flush(line_no)
                name = line[1:].strip()
                if not name:
                    raise FastaError("empty record header", line_no)
                chunks, annotation = [], []
            elif line.startswith("#SS3"):
                if name is None:
                    raise FastaError("annotation before any record header", line_no)
                annotation.append(line[4:].strip())
            else:
                if name is None:
                    raise FastaError("sequence data before any record header", line_no)
                seq_line = line_no
                chunks.append(line.upper())
        flush(line_no if records or name else 0)
    return records


def write_fasta(records: list[FastaRecord], path, vocab: Vocab) -> None:
    """Write records atomically (temp file + rename)."""
    if not records:
        raise ValueError("no records to write")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".fasta.tmp")
    try:
        with os.fdopen(fd, "w", encoding="ascii") as fh:
            for rec in records:
                fh.write(f">{rec.name}\n")
                fh.write(vocab.decode(rec.seq.ids) + "\n")
                if rec.annotation is not None:
                    fh.write(f"#SS3 {rec.annotation}\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
