"""Deterministic seed derivation.

Every random stream in the package is keyed by a path of integers hanging
off one root seed, e.g. ``derive_seed(seed, SUBSET, j)``.  The mix is
SplitMix64 applied to each path element in turn, so the tree is the same on
every platform and independent of numpy's own seeding conventions.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

# Stream tags used under a member seed.
SUBSET = 1
INIT = 2
SHUFFLE = 3


def splitmix64(x: int) -> int:
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, *path: int) -> int:
    """Fold ``path`` into ``base``: ``s <- splitmix64(s ^ splitmix64(p))``."""
    s = int(base) & MASK64
    for p in path:
        s = splitmix64(s ^ splitmix64(int(p) & MASK64))
    return s


def rng(base: int, *path: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(base, *path)))
