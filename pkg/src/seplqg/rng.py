"""Counter-based random streams.

Every stochastic component draws from a Philox generator keyed by a
(seed, *tags) tuple, so independent pieces of work (Monte Carlo runs,
filter channels, ensemble propagation) get reproducible, scheduling-
independent streams.  The same key always reproduces the same stream.
"""

import numpy as np


def _tag_to_int(tag):
    if isinstance(tag, str):
        # stable 64-bit FNV-1a, independent of PYTHONHASHSEED
        h = 0xCBF29CE484222325
        for b in tag.encode():
            h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return h
    return int(tag) & 0xFFFFFFFFFFFFFFFF


def stream(seed, *tags):
    """Return a Philox Generator keyed by (seed, *tags).

    Tags may be ints or short strings; strings hash to stable ints so
    keys like (seed, run_idx, "w") are fine.
    """
    words = [_tag_to_int(seed)] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
