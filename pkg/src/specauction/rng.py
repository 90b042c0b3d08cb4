"""Keyed random streams.

A stream is identified by integer keys ``(seed, *keys)``; the same keys always
produce the same draws, and distinct keys give statistically independent
streams (numpy ``SeedSequence`` hashing).
"""

from __future__ import annotations

import numpy as np

# Phase tags keep the streams of different algorithm steps apart.
PHASE_DEMAND = 1
PHASE_ALLOCATE_SMALL = 2
PHASE_PICK = 3
PHASE_RETAIN = 4
PHASE_PERTURB = 5
PHASE_ORACLE = 6
PHASE_MECHANISM = 7


def keyed(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def as_seed(rng) -> int:
    """Turn a Generator or int into a base seed for keyed streams."""
    if rng is None:
        return 0
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    return int(rng)


def trial_seed(seed: int, trial: int) -> int:
    """Derived per-trial seed, independent of how trials are scheduled."""
    return int(keyed(seed, trial).integers(0, 2**63 - 1))
