"""Counter-based random substreams.

Every random draw in a simulation comes from a generator keyed by
``(root seed, purpose, *counters)``.  Two call sites never share state, so
the order in which clients are processed (or how many run in parallel)
cannot change any result.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "data": 0,
    "partition": 1,
    "init": 2,
    "clients": 3,
    "batches": 4,
    "noise": 5,
    "kmeans": 6,
}


def substream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Return an independent generator for ``purpose`` at the given counters."""
    try:
        tag = PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown RNG purpose {purpose!r}") from None
    key = (tag, *(int(c) for c in counters))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
