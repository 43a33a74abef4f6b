"""Multinomial logistic-regression head, the ERM reference for ablations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .metrics import EvalReport, evaluate
from .optim import SgdSchedule, run_sgd
from .seeding import INIT, SHUFFLE, derive_seed, rng
from .store import FeatureStore


@dataclass(frozen=True)
class LinearProbe:
    weights: np.ndarray  # (dim, K)
    bias: np.ndarray  # (K,)

    def logits(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=-1)


def softmax_xent(theta: np.ndarray, X: np.ndarray, y: np.ndarray, dim: int, k: int):
    """Mean cross-entropy and gradient for ``theta = [W.ravel(), b]``."""
    W = theta[:dim * k].reshape(dim, k)
    b = theta[dim * k:]
    z = X @ W + b
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    n = len(y)
    loss = float(np.mean(lse - z[np.arange(n), y]))
    g = np.exp(z - lse[:, None])
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, np.concatenate([(X.T @ g).ravel(), g.sum(axis=0)])


def fit_linear_probe(store: FeatureStore, cfg: TrainConfig, seed: int = 0, indices=None):
    """Train on ``store`` (or ``store[indices]``) with the same SGD settings as
    ensemble members.  Returns ``(probe, loss_trace)``."""
    dim, k = store.dim, store.n_classes
    X, y = store.features, store.labels
    theta0 = np.concatenate([rng(seed, INIT).normal(0.0, 0.01, size=dim * k), np.zeros(k)])
    data = np.arange(store.n_samples) if indices is None else np.asarray(indices)

    def loss_and_grad(theta, batch):
        return softmax_xent(theta, X[batch], y[batch], dim, k)

    sched = SgdSchedule(cfg.learning_rate, cfg.epochs, cfg.batch_size, derive_seed(seed, SHUFFLE))
    theta, trace = run_sgd(theta0, loss_and_grad, data, sched)
    return LinearProbe(theta[:dim * k].reshape(dim, k), theta[dim * k:]), trace


def linear_probe(train: FeatureStore, test: FeatureStore, cfg: TrainConfig | None = None,
                 seed: int = 0) -> EvalReport:
    if train.dim != test.dim:
        raise ValueError(f"train dim {train.dim} != test dim {test.dim}")
    probe, _ = fit_linear_probe(train, cfg or TrainConfig(), seed)
    return evaluate(probe, test)
