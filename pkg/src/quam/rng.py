"""Deterministic random-stream derivation.

Every stochastic component in the package draws from a Generator obtained
here, so a run is a pure function of its base seed.  Subsystems derive
independent streams by combining the base seed with small integer keys
(e.g. ensemble member index, search class index) instead of sharing one
global stream.
"""

from __future__ import annotations

import numpy as np


def derive_rng(base_seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for (base_seed, *keys).

    The stream depends on the key values, not on call order, so e.g. the
    search for class 3 sees the same randomness no matter when it runs.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(base_seed), *map(int, keys)))))
