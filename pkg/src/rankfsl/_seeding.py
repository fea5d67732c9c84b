"""Seed derivation shared by every randomized operation.

All streams are derived from explicit integer keys through
``numpy.random.SeedSequence`` so that results never depend on call order,
thread scheduling, or hidden global state.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

SeedLike = Union[int, Sequence[int]]

_MASK64 = (1 << 64) - 1


def seed_key(seed: SeedLike, *extra: int) -> list[int]:
    """Flatten ``seed`` plus extra keys into non-negative 64-bit words."""
    if isinstance(seed, (int, np.integer)):
        parts = [int(seed)]
    else:
        parts = [int(s) for s in seed]
    parts.extend(int(e) for e in extra)
    return [p & _MASK64 for p in parts]


def rng_for(seed: SeedLike, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed_key(seed, *extra)))
