"""Balanced subsets that give each ensemble member its own view of the data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import SUBSET, derive_seed, rng
from .store import FeatureStore, class_index, group_index

KINDS = ("class_balanced", "group_balanced", "fixed_full")


@dataclass(frozen=True)
class SamplingMode:
    """How a member's training subset is drawn.

    ``per_cell_size`` is the number of samples taken from every class (or
    group) cell; ``None`` means the size of the smallest cell, the largest
    value that still allows exact balance.
    """

    kind: str = "class_balanced"
    per_cell_size: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sampling kind {self.kind!r}; expected one of {KINDS}")
        if self.per_cell_size is not None and self.per_cell_size < 1:
            raise ValueError(f"per_cell_size must be positive, got {self.per_cell_size}")


def _cells(store: FeatureStore, mode: SamplingMode) -> dict[int, np.ndarray]:
    if mode.kind == "group_balanced":
        if not store.has_groups:
            raise ValueError("group_balanced sampling needs a store with group labels")
        return group_index(store)
    return class_index(store)


def cell_size(store: FeatureStore, mode: SamplingMode) -> int:
    """Per-cell draw size ``mode`` resolves to on ``store``."""
    cells = _cells(store, mode)
    smallest = min(len(v) for v in cells.values())
    m = smallest if mode.per_cell_size is None else mode.per_cell_size
    if m > smallest:
        key = min(cells, key=lambda c: len(cells[c]))
        raise ValueError(f"per_cell_size {m} exceeds the {smallest} samples of cell {key}")
    return m


def draw_subset(store: FeatureStore, mode: SamplingMode, seed: int) -> np.ndarray:
    """Sorted sample indices for one member.

    Balanced modes take ``m`` indices uniformly without replacement from each
    cell, visiting cells in ascending order with a single generator.
    ``fixed_full`` ignores the seed and returns every index.
    """
    if mode.kind == "fixed_full":
        return np.arange(store.n_samples)
    cells = _cells(store, mode)
    m = cell_size(store, mode)
    gen = rng(seed)
    picks = [gen.choice(cells[c], size=m, replace=False) for c in sorted(cells)]
    return np.sort(np.concatenate(picks))


def subset_sequence(store: FeatureStore, mode: SamplingMode, base_seed: int, n_members: int) -> list[np.ndarray]:
    """Subsets for members ``0..N-1``; member ``j`` uses ``derive_seed(base_seed, SUBSET, j)``."""
    if n_members < 1:
        raise ValueError("need at least one member")
    return [draw_subset(store, mode, derive_seed(base_seed, SUBSET, j)) for j in range(n_members)]
