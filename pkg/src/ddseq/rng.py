"""Counter-based random streams.

Every stochastic operation in the package draws from a Philox generator
keyed by a root seed plus a structured path (e.g. ("corrupt", sequence
key, timestep)). Streams are therefore independent of batch composition,
evaluation order, and thread count: the draws for one (sequence,
position, timestep) are a pure function of the seed and the path.
"""

from __future__ import annotations

import numpy as np

_TAGS: dict[str, int] = {}


def _encode(part) -> int:
    if isinstance(part, str):
        # stable small-int tag per label, derived from the bytes
        if part not in _TAGS:
            _TAGS[part] = int.from_bytes(part.encode(), "little") % (2**63)
        return _TAGS[part]
    return int(part)


def stream(seed: int, *path) -> np.random.Generator:
    """Independent generator for (seed, *path). Path parts are ints or labels."""
    entropy = [int(seed) % (2**63)] + [_encode(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
