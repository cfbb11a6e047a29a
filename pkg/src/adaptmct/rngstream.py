"""Counter-based random number substreams.

Every stochastic task in the package draws from a Philox generator
keyed by a root seed plus a structured path (purpose tag, replicate
index, ...).  Streams are independent of execution order and thread
count, which is what makes simulation output bit-reproducible under
any parallelism.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream", "substream_seed"]

# Purpose tags for stream paths; values are arbitrary but frozen.
STAGE1_DATA = 1
STAGE2_DATA = 2
NONADAPTIVE_DATA = 3
ANALYSIS = 4
TABLES = 5


def substream(seed: int, *path: int) -> np.random.Generator:
    """A Philox generator for the given root seed and stream path."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seed=ss))


def substream_seed(seed: int, *path: int) -> int:
    """A 63-bit integer seed derived from the same substream (for APIs
    that take plain seeds)."""
    return int(substream(seed, *path).integers(2 ** 63))
