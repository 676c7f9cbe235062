"""Seeded random generation.

Every stochastic operation in the package takes an explicit seed and draws
from a counter-based Philox generator; nothing touches global RNG state.
"""

from __future__ import annotations

import numpy as np

SeedLike = "int | np.random.SeedSequence"


def generator(seed) -> np.random.Generator:
    """Philox generator from an integer seed or a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def children(seed, n: int) -> list[np.random.SeedSequence]:
    """Deterministically derive ``n`` independent child seeds."""
    if isinstance(seed, np.random.SeedSequence):
        return seed.spawn(n)
    return np.random.SeedSequence(int(seed)).spawn(n)
