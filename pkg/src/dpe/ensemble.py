"""Sequentially trained, diversified ensembles of prototype classifiers.

Member ``n`` is trained on its own balanced subset while every earlier
member stays frozen.  Its loss adds ``alpha`` times the inter-prototype
similarity penalty: the absolute inner products between same-class
prototypes of different members, summed over ordered pairs of members
``1..n`` and divided by ``n * dim``.  Prediction averages the members'
untempered class probabilities and takes the argmax.

Model file layout (little-endian)::

    magic   4s  b"DPEM"
    version u32 1
    K       u32
    dim     u32
    N       u32
    N times: d_s f64, prototypes f64 (K * dim, row-major)
    digest_len u32, digest bytes (utf-8 config digest)
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .optim import DivergenceError, SgdSchedule, run_sgd
from .prototype import PrototypeSet, class_probabilities, distances, normalize, unit_loss_and_gradients
from .sampling import subset_sequence
from .seeding import INIT, SHUFFLE, derive_seed, rng
from .store import FeatureStore, FormatError

log = logging.getLogger(__name__)

MAGIC = b"DPEM"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
INIT_STD = 0.01
MAX_DIGEST = 1 << 16


class TrainingError(RuntimeError):
    pass


@dataclass(eq=False)
class EnsembleModel:
    n_classes: int
    dim: int
    members: list[PrototypeSet] = field(default_factory=list)
    config_digest: str = ""

    def __post_init__(self):
        if self.n_classes < 1 or self.dim < 1:
            raise ValueError("n_classes and dim must be positive")
        members, self.members = self.members, []
        for ps in members:
            self.append(ps)

    @property
    def n_members(self) -> int:
        return len(self.members)

    def append(self, ps: PrototypeSet) -> None:
        if (ps.n_classes, ps.dim) != (self.n_classes, self.dim):
            raise ValueError(
                f"member shape ({ps.n_classes}, {ps.dim}) != model shape ({self.n_classes}, {self.dim})")
        self.members.append(ps.freeze())

    def prefix(self, n: int) -> EnsembleModel:
        """The first ``n`` members; exact because members never change once added."""
        if not 1 <= n <= self.n_members:
            raise ValueError(f"prefix size {n} outside [1, {self.n_members}]")
        return EnsembleModel(self.n_classes, self.dim, self.members[:n], self.config_digest)

    def prototype_tensor(self) -> np.ndarray:
        """``(N, K, dim)`` stack of member prototypes."""
        return np.stack([m.prototypes for m in self.members])

    def to_bytes(self) -> bytes:
        digest = self.config_digest.encode("utf-8")
        parts = [_HEADER.pack(MAGIC, VERSION, self.n_classes, self.dim, self.n_members)]
        parts += [m.to_bytes() for m in self.members]
        parts += [struct.pack("<I", len(digest)), digest]
        return b"".join(parts)

    def __eq__(self, other):
        if not isinstance(other, EnsembleModel):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    __hash__ = None


# -- inter-prototype similarity ------------------------------------------

def _stack_frozen(current: PrototypeSet, frozen) -> np.ndarray:
    K, d = current.prototypes.shape
    for f in frozen:
        if f.prototypes.shape != (K, d):
            raise ValueError(f"frozen member shape {f.prototypes.shape} != current {(K, d)}")
    if not frozen:
        return np.empty((0, K, d))
    return np.stack([f.prototypes for f in frozen])


def _ips_terms(cur: np.ndarray, F: np.ndarray, weight_scale: float):
    n = F.shape[0] + 1
    d = cur.shape[1]
    norm = 1.0 / (n * d)
    cross = np.einsum("kd,mkd->mk", cur, F)
    loss = 2.0 * np.abs(cross).sum()
    if F.shape[0] > 1:
        gram = np.einsum("mkd,lkd->kml", F, F)
        loss += np.abs(gram).sum() - np.abs(np.einsum("kmm->km", gram)).sum()
    grad = 2.0 * np.einsum("mk,mkd->kd", np.sign(cross), F)
    return loss * norm * weight_scale, grad * norm * weight_scale


def ips_loss(current: PrototypeSet, frozen) -> float:
    """Similarity penalty for stage ``n = len(frozen) + 1``; zero when nothing is frozen."""
    F = _stack_frozen(current, frozen)
    return float(_ips_terms(current.prototypes, F, 1.0)[0])


def ips_gradient(current: PrototypeSet, frozen) -> np.ndarray:
    """Gradient of :func:`ips_loss` w.r.t. ``current`` only, using ``sign(0) = 0``."""
    F = _stack_frozen(current, frozen)
    return _ips_terms(current.prototypes, F, 1.0)[1]


# -- training -------------------------------------------------------------

def init_prototypes(n_classes: int, dim: int, seed: int) -> PrototypeSet:
    return PrototypeSet(rng(seed, INIT).normal(0.0, INIT_STD, size=(n_classes, dim)), 1.0)


def train_member(store: FeatureStore, subset, frozen, cfg: TrainConfig, member_seed: int):
    """Train one member on ``store[subset]`` against the frozen ``frozen`` list.

    Returns ``(member, loss_trace)``; the trace holds the per-epoch mean of
    the total (classification plus weighted similarity) loss.
    """
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise TrainingError("empty training subset")
    present = np.unique(store.labels[subset])
    if present.size != store.n_classes:
        missing = sorted(set(range(store.n_classes)) - set(present.tolist()))
        raise TrainingError(f"training subset has no samples of class {missing[0]}")

    K, d = store.n_classes, store.dim
    init = init_prototypes(K, d, member_seed)
    F = _stack_frozen(init, frozen)
    alpha = cfg.ips_weight if F.shape[0] else 0.0
    tau = cfg.temperature
    xu = normalize(store.features[subset])
    y = store.labels[subset]

    def loss_and_grad(theta, batch):
        protos = theta[:-1].reshape(K, d)
        if theta[-1] == 0.0 or not np.any(protos != 0.0, axis=1).all():
            raise TrainingError("a prototype or the distance scale reached exactly zero")
        loss, g_p, g_s = unit_loss_and_gradients(xu[batch], y[batch], protos, theta[-1], tau)
        if alpha:
            l_ips, g_ips = _ips_terms(protos, F, alpha)
            loss += l_ips
            g_p = g_p + g_ips
        return loss, np.append(g_p.ravel(), g_s)

    theta0 = np.append(init.prototypes.ravel(), init.scale)
    sched = SgdSchedule(cfg.learning_rate, cfg.epochs, cfg.batch_size, derive_seed(member_seed, SHUFFLE))
    try:
        # Overflow shows up as a non-finite loss, which run_sgd reports with coordinates.
        with np.errstate(over="ignore", invalid="ignore"):
            theta, trace = run_sgd(theta0, loss_and_grad, np.arange(subset.size), sched)
        member = PrototypeSet(theta[:-1].reshape(K, d), theta[-1])
    except (DivergenceError, ValueError) as exc:
        raise TrainingError(f"member training failed: {exc}") from exc
    return member, trace


def train_ensemble(store: FeatureStore, cfg: TrainConfig, n_members: int | None = None,
                   on_member=None) -> EnsembleModel:
    """Train ``cfg.n_members`` members in sequence (``n_members`` overrides).

    ``on_member(j, member, trace)`` is called after each member is frozen.
    """
    n = cfg.n_members if n_members is None else n_members
    subsets = subset_sequence(store, cfg.sampling, cfg.seed, n)
    model = EnsembleModel(store.n_classes, store.dim, config_digest=cfg.digest())
    for j in range(n):
        member, trace = train_member(store, subsets[j], model.members, cfg, derive_seed(cfg.seed, j))
        model.append(member)
        log.debug("member %d: final loss %.6g, |d_s| %.4g", j, trace[-1], abs(member.scale))
        if on_member is not None:
            on_member(j, member, trace)
    return model


# -- inference ------------------------------------------------------------

def _check_input(X, model: EnsembleModel) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.dim:
        raise ValueError(f"input dim {X.shape[-1]} != model dim {model.dim}")
    if model.n_members == 0:
        raise ValueError("model has no members")
    return X


def ensemble_probabilities(x, model: EnsembleModel) -> np.ndarray:
    """Mean of the members' class probabilities, summed in member order."""
    x = _check_input(x, model)
    total = np.zeros(x.shape[:-1] + (model.n_classes,))
    for m in model.members:
        total += class_probabilities(x, m)
    return total / model.n_members


def predict(x, model: EnsembleModel):
    """Argmax of :func:`ensemble_probabilities`; ties go to the lowest class index."""
    probs = ensemble_probabilities(x, model)
    labels = np.argmax(probs, axis=-1)
    return int(labels) if np.ndim(labels) == 0 else labels


def similarity_matrix(model: EnsembleModel, k: int) -> np.ndarray:
    """``(N, N)`` cosine similarities between the members' class-``k`` prototypes."""
    if not 0 <= k < model.n_classes:
        raise ValueError(f"class {k} outside [0, {model.n_classes})")
    u = normalize(model.prototype_tensor()[:, k, :])
    sim = u @ u.T
    np.fill_diagonal(sim, 1.0)
    return sim


def mean_offdiag_abs_cosine(model: EnsembleModel) -> float:
    """Mean ``|cos|`` over distinct member pairs, pooled across classes."""
    n = model.n_members
    if n < 2:
        return 0.0
    mask = ~np.eye(n, dtype=bool)
    vals = [np.abs(similarity_matrix(model, k)[mask]).mean() for k in range(model.n_classes)]
    return float(np.mean(vals))


def nearest_samples(model: EnsembleModel, member: int, k: int, store: FeatureStore, top_k: int = 10):
    """Indices and distances of the ``top_k`` samples closest to prototype ``(member, k)``.

    Ranked by scaled distance, ties broken by ascending index.
    """
    if not 0 <= member < model.n_members:
        raise ValueError(f"member {member} outside [0, {model.n_members})")
    if not 0 <= k < model.n_classes:
        raise ValueError(f"class {k} outside [0, {model.n_classes})")
    if not 1 <= top_k <= store.n_samples:
        raise ValueError(f"top_k {top_k} outside [1, {store.n_samples}]")
    if store.dim != model.dim:
        raise ValueError(f"store dim {store.dim} != model dim {model.dim}")
    d = distances(store.features, model.members[member])[:, k]
    order = np.argsort(d, kind="stable")[:top_k]
    return order, d[order]


# -- persistence ----------------------------------------------------------

def model_from_bytes(data: bytes) -> EnsembleModel:
    if len(data) < _HEADER.size:
        raise FormatError(f"file too short for header: {len(data)} bytes", "offset 0")
    magic, version, k, dim, n = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", "offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", "offset 4")
    if k < 1 or dim < 1 or n < 1:
        raise FormatError(f"invalid shape K={k} dim={dim} N={n}", "offset 8")
    member_bytes = 8 * (1 + k * dim)
    off = _HEADER.size
    end_members = off + n * member_bytes
    if len(data) < end_members + 4:
        raise FormatError(f"truncated: header implies at least {end_members + 4} bytes, file has {len(data)}",
                          f"offset {len(data)}")
    model = EnsembleModel(k, dim)
    for j in range(n):
        scale = struct.unpack_from("<d", data, off)[0]
        protos = np.frombuffer(data, dtype="<f8", count=k * dim, offset=off + 8).reshape(k, dim)
        try:
            model.append(PrototypeSet(protos.astype(np.float64), scale))
        except ValueError as exc:
            raise FormatError(f"member {j}: {exc}", f"offset {off}") from None
        off += member_bytes
    (dlen,) = struct.unpack_from("<I", data, off)
    if dlen > MAX_DIGEST or len(data) != off + 4 + dlen:
        raise FormatError(f"digest length {dlen} inconsistent with file size {len(data)}", f"offset {off}")
    try:
        model.config_digest = data[off + 4:].decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config digest is not valid utf-8", f"offset {off + 4}") from None
    return model


def save_model(model: EnsembleModel, path) -> None:
    Path(path).write_bytes(model.to_bytes())


def load_model(path) -> EnsembleModel:
    return model_from_bytes(Path(path).read_bytes())
