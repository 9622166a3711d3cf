"""Deterministic RNG derivation.

Every random draw in the package comes from a generator derived from the
master seed plus a fixed integer path (domain, epoch, iteration, ...). This
makes any point in a run reproducible from counters alone, which is what
checkpoint resume relies on.
"""

from __future__ import annotations

import numpy as np

DOMAIN_INIT = 1        # parameter initialization
DOMAIN_PROTOTYPES = 2  # prototype bank initialization
DOMAIN_DATA = 3        # synthetic image generation
DOMAIN_PLAN = 4        # epoch batch plans
DOMAIN_AUG = 5         # per-step augmentation draws
DOMAIN_PROBE = 6       # probe splits and probe-side randomness


def derived_rng(seed: int, *path: int) -> np.random.Generator:
    """A generator whose stream depends only on (seed, path)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), *map(int, path))))
