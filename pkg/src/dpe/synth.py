"""Synthetic subpopulation-shift benchmark.

Each (class, attribute) pair is one group, drawn from an isotropic Gaussian
centred at ``class_means[c] + attribute_offsets[c, a]``.  Training data
follows per-class attribute proportions (a majority attribute plus rarer
ones); the test split has the same number of samples in every group so the
worst group carries as much weight as the best.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import rng
from .store import FeatureStore

TRAIN_STREAM = 11
TEST_STREAM = 12


DEFAULT_DIM = 64


def _default_means() -> np.ndarray:
    # The class signal is weak and lives on axis 0.
    m = np.zeros((2, DEFAULT_DIM))
    m[0, 0], m[1, 0] = -1.0, 1.0
    return m


def _default_offsets() -> np.ndarray:
    # Attribute 0 (majority) agrees with the class on axis 1, attribute 1
    # flips it, attribute 2 sits on its own axis and is uninformative.
    off = np.zeros((2, 3, DEFAULT_DIM))
    off[0, 0, 1], off[1, 0, 1] = -2.0, 2.0
    off[0, 1, 1], off[1, 1, 1] = 2.0, -2.0
    off[0, 2, 2] = off[1, 2, 2] = 2.0
    return off


@dataclass
class SynthSpec:
    class_means: np.ndarray = field(default_factory=_default_means)
    attribute_offsets: np.ndarray = field(default_factory=_default_offsets)
    noise_std: float = 0.4
    proportions: np.ndarray = field(default_factory=lambda: np.array([[0.8, 0.1, 0.1], [0.8, 0.1, 0.1]]))
    n_train: int | tuple = (600, 300)
    n_test: int = 200
    seed: int = 0

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        self.attribute_offsets = np.asarray(self.attribute_offsets, dtype=np.float64)
        self.proportions = np.asarray(self.proportions, dtype=np.float64)
        validate_spec(self)

    @property
    def n_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.attribute_offsets.shape[1]

    @property
    def dim(self) -> int:
        return self.class_means.shape[1]

    def group_id(self, c: int, a: int) -> int:
        return c * self.n_attributes + a

    def group_means(self) -> np.ndarray:
        """``(K, A, dim)`` centres of every group."""
        return self.class_means[:, None, :] + self.attribute_offsets


def validate_spec(spec: SynthSpec) -> None:
    K, dim = spec.class_means.shape if spec.class_means.ndim == 2 else (0, 0)
    if K < 2 or dim < 1:
        raise ValueError(f"class_means must be (K >= 2, dim >= 1), got {spec.class_means.shape}")
    if spec.attribute_offsets.ndim != 3 or spec.attribute_offsets.shape[0] != K \
            or spec.attribute_offsets.shape[2] != dim:
        raise ValueError(f"attribute_offsets must be (K, A, dim), got {spec.attribute_offsets.shape}")
    A = spec.attribute_offsets.shape[1]
    if A < 2:
        raise ValueError("need a majority and at least one minority attribute")
    if spec.proportions.shape != (K, A):
        raise ValueError(f"proportions must be (K, A) = {(K, A)}, got {spec.proportions.shape}")
    if np.any(~np.isfinite(spec.proportions)) or np.any(spec.proportions <= 0):
        raise ValueError("proportions must be positive")
    if not np.allclose(spec.proportions.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("proportions must sum to 1 within each class")
    if not (spec.noise_std > 0 and np.isfinite(spec.noise_std)):
        raise ValueError("noise_std must be positive")
    n_train = np.broadcast_to(np.asarray(spec.n_train), (K,))
    if np.any(n_train < 1) or spec.n_test < 1:
        raise ValueError("n_train and n_test must be positive")


def allocate(n: int, proportions) -> np.ndarray:
    """Split ``n`` into integer counts by largest remainder (ties to lower index)."""
    p = np.asarray(proportions, dtype=np.float64)
    raw = n * p / p.sum()
    counts = np.floor(raw).astype(np.int64)
    short = n - counts.sum()
    order = sorted(range(len(p)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _draw(spec: SynthSpec, counts: np.ndarray, stream: int, name: str) -> FeatureStore:
    gen = rng(spec.seed, stream)
    means = spec.group_means()
    feats, labels, groups = [], [], []
    for c in range(spec.n_classes):
        for a in range(spec.n_attributes):
            m = int(counts[c, a])
            feats.append(means[c, a] + spec.noise_std * gen.standard_normal((m, spec.dim)))
            labels.append(np.full(m, c))
            groups.append(np.full(m, spec.group_id(c, a)))
    return FeatureStore(np.concatenate(feats), np.concatenate(labels), np.concatenate(groups),
                        n_classes=spec.n_classes, n_groups=spec.n_classes * spec.n_attributes, name=name)


def generate_synthetic(spec: SynthSpec | None = None) -> tuple[FeatureStore, FeatureStore]:
    """``(train, test)`` stores.

    ``n_train`` is a per-class count (one int for all classes, or one per
    class); ``n_test`` is per group.
    """
    spec = spec or SynthSpec()
    n_train = np.broadcast_to(np.asarray(spec.n_train), (spec.n_classes,))
    train_counts = np.stack([allocate(int(n_train[c]), spec.proportions[c]) for c in range(spec.n_classes)])
    test_counts = np.full((spec.n_classes, spec.n_attributes), spec.n_test)
    return _draw(spec, train_counts, TRAIN_STREAM, "synth-train"), _draw(spec, test_counts, TEST_STREAM, "synth-test")
