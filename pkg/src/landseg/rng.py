"""Seedable, splittable random streams.

Every random draw in the package (weight init, dropout masks, epoch
shuffles, tile texture) comes from ``numpy.random.Philox``, a counter-based
generator, keyed through ``SeedSequence``. A stream is named by an integer
seed plus a tuple of integer labels, so independent consumers never share
state and any single stream can be recreated without replaying the others.
"""

from __future__ import annotations

import numpy as np

# Stream labels. Fixed integers keep streams stable across versions.
INIT = 1
DROPOUT = 2
SHUFFLE = 3
TEXTURE = 4
GRADCHECK = 5


def make_rng(seed: int, *labels: int) -> np.random.Generator:
    """Return a Philox generator for the stream ``(seed, *labels)``."""
    if seed < 0 or any(lab < 0 for lab in labels):
        raise ValueError("seed and stream labels must be non-negative")
    ss = np.random.SeedSequence([int(seed), *map(int, labels)])
    return np.random.Generator(np.random.Philox(ss))
