"""Single prototype classifier on normalized embeddings.

A member holds one prototype per class and a learnable scale ``d_s``.  The
distance between an input and a prototype is the Euclidean distance between
their unit-normalized directions, multiplied by ``|d_s|``.  Inference uses a
softmax over negative distances; training uses the same softmax with the
distances divided by a temperature.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class PrototypeSet:
    """``prototypes`` is ``(K, dim)``; row ``k`` is the prototype of class ``k``."""

    prototypes: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.prototypes = np.array(self.prototypes, dtype=np.float64)
        self.scale = float(self.scale)
        validate(self)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    @property
    def frozen(self) -> bool:
        return not self.prototypes.flags.writeable

    def freeze(self) -> PrototypeSet:
        self.prototypes.setflags(write=False)
        return self

    def copy(self) -> PrototypeSet:
        return PrototypeSet(self.prototypes.copy(), self.scale)

    def to_bytes(self) -> bytes:
        return np.float64(self.scale).astype("<f8").tobytes() + self.prototypes.astype("<f8").tobytes()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, PrototypeSet):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    __hash__ = None


def validate(ps: PrototypeSet) -> None:
    p = ps.prototypes
    if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
        raise ValueError(f"prototypes must be a non-empty (K, dim) matrix, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite prototype entry")
    zero = np.flatnonzero(~np.any(p != 0.0, axis=1))
    if zero.size:
        raise ValueError(f"prototype {int(zero[0])} is the zero vector")
    if not np.isfinite(ps.scale) or ps.scale == 0.0:
        raise ValueError(f"distance scale must be finite and nonzero, got {ps.scale}")


def _unit_rows(a: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite {what}")
    # Rescale before taking norms so tiny or huge inputs neither underflow nor overflow.
    peak = np.max(np.abs(a), axis=-1, keepdims=True)
    if np.any(peak == 0.0):
        raise ValueError(f"zero {what} cannot be normalized")
    scaled = a / peak
    norms = np.linalg.norm(scaled, axis=-1, keepdims=True)
    return scaled / norms, norms * peak


def normalize(a) -> np.ndarray:
    """Unit-normalize the last axis of ``a``; zero vectors are rejected."""
    return _unit_rows(np.asarray(a, dtype=np.float64), "vector")[0]


def scaled_distance(x, p, scale: float) -> float:
    """``|scale| * || x/|x| - p/|p| ||``."""
    if not np.isfinite(scale):
        raise ValueError("non-finite distance scale")
    xu = normalize(np.atleast_1d(x))
    pu = normalize(np.atleast_1d(p))
    if xu.shape != pu.shape:
        raise ValueError(f"dimension mismatch {xu.shape} vs {pu.shape}")
    return abs(scale) * float(np.linalg.norm(xu - pu))


def _chord(xu: np.ndarray, pu: np.ndarray) -> np.ndarray:
    """Pairwise ``||xu_b - pu_k||`` for unit rows."""
    diff = xu[:, None, :] - pu[None, :, :]
    return np.sqrt(np.einsum("bkd,bkd->bk", diff, diff))


def distances(X, ps: PrototypeSet) -> np.ndarray:
    """``(B, K)`` scaled distances from each row of ``X`` to each prototype."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != ps.dim:
        raise ValueError(f"input dim {X.shape[1]} != prototype dim {ps.dim}")
    xu = normalize(X)
    pu = normalize(ps.prototypes)
    return abs(ps.scale) * _chord(xu, pu)


def _softmax_neg(d: np.ndarray) -> np.ndarray:
    z = -d
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_probabilities(x, ps: PrototypeSet) -> np.ndarray:
    """Softmax over negative (untempered) distances.

    Accepts a single vector (returns ``(K,)``) or a batch (returns ``(B, K)``).
    """
    x = np.asarray(x, dtype=np.float64)
    probs = _softmax_neg(distances(x, ps))
    return probs[0] if x.ndim == 1 else probs


def _log_softmax_at(d: np.ndarray, tau: float, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = -d / tau
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(len(y)), y]
    probs = np.exp(shifted - lse[:, None])
    return losses, probs


def _check_batch(X, y, ps: PrototypeSet, tau: float) -> tuple[np.ndarray, np.ndarray]:
    if not tau > 0 or not np.isfinite(tau):
        raise ValueError(f"temperature must be positive and finite, got {tau}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y)).astype(np.int64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape != (X.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match batch of {X.shape[0]}")
    if y.min() < 0 or y.max() >= ps.n_classes:
        raise ValueError(f"label out of range [0, {ps.n_classes})")
    return X, y


def sample_loss(x, y: int, ps: PrototypeSet, tau: float) -> float:
    """Tempered cross-entropy ``-log softmax(-D/tau)[y]`` for one sample."""
    X, yv = _check_batch(x, y, ps, tau)
    losses, _ = _log_softmax_at(distances(X, ps), tau, yv)
    return float(losses[0])


def batch_loss(X, y, ps: PrototypeSet, tau: float) -> float:
    """Mean of :func:`sample_loss` over the batch."""
    X, y = _check_batch(X, y, ps, tau)
    losses, _ = _log_softmax_at(distances(X, ps), tau, y)
    return float(losses.mean())


def loss_and_gradients(X, y, ps: PrototypeSet, tau: float) -> tuple[float, np.ndarray, float]:
    """Mean tempered loss and its gradients w.r.t. the prototypes and ``d_s``.

    The chain runs softmax -> distance -> (unit prototype, |d_s|) -> raw
    prototype.  Where an input coincides with a prototype direction the
    chord length is zero and that term contributes a zero subgradient, as
    does ``d_s = 0`` through ``sign``.
    """
    X, y = _check_batch(X, y, ps, tau)
    if X.shape[1] != ps.dim:
        raise ValueError(f"input dim {X.shape[1]} != prototype dim {ps.dim}")
    return unit_loss_and_gradients(normalize(X), y, ps.prototypes, ps.scale, tau)


def unit_loss_and_gradients(xu: np.ndarray, y: np.ndarray, prototypes: np.ndarray, scale: float,
                            tau: float) -> tuple[float, np.ndarray, float]:
    """:func:`loss_and_gradients` for already-normalized inputs, without checks."""
    B = xu.shape[0]
    pu, pnorm = _unit_rows(prototypes, "prototype")
    chord = _chord(xu, pu)
    d = abs(scale) * chord
    losses, probs = _log_softmax_at(d, tau, y)

    # dL/dD for the batch mean: -(softmax - onehot) / (B * tau)
    g_d = probs
    g_d[np.arange(B), y] -= 1.0
    g_d *= -1.0 / (B * tau)

    g_scale = float(np.sign(scale) * np.sum(g_d * chord))

    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(chord > 0.0, g_d * abs(scale) / chord, 0.0)
    # d chord_bk / d pu_k = (pu_k - xu_b) / chord_bk
    g_pu = w.sum(axis=0)[:, None] * pu - w.T @ xu
    radial = np.sum(g_pu * pu, axis=1, keepdims=True)
    g_p = (g_pu - radial * pu) / pnorm
    return float(losses.mean()), g_p, g_scale


def loss_gradients(X, y, ps: PrototypeSet, tau: float) -> tuple[np.ndarray, float]:
    _, g_p, g_s = loss_and_gradients(X, y, ps, tau)
    return g_p, g_s
