"""Seed handling shared by every sampler.

All randomness flows through ``numpy.random.Generator`` backed by PCG64.
Independent streams for batches or trials come from ``SeedSequence.spawn`` so
results never depend on how work is scheduled.
"""

from __future__ import annotations

import numpy as np

SeedLike = int | np.random.SeedSequence | np.random.Generator | None


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(seed))


def as_seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        return np.random.SeedSequence(seed.integers(0, 2**63 - 1))
    return np.random.SeedSequence(seed)


def spawn(seed: SeedLike, n: int) -> list[np.random.SeedSequence]:
    return as_seed_sequence(seed).spawn(n)
