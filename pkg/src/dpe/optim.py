"""Plain mini-batch SGD and a central finite-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .seeding import rng

LossAndGrad = Callable[[np.ndarray, np.ndarray], "tuple[float, np.ndarray]"]


class DivergenceError(FloatingPointError):
    """Loss or gradient became non-finite during SGD."""

    def __init__(self, epoch: int, batch: int, what: str):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite {what} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class SgdSchedule:
    learning_rate: float
    epochs: int
    batch_size: int
    shuffle_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def run_sgd(params: np.ndarray, loss_and_grad: LossAndGrad, data, sched: SgdSchedule):
    """Minimize by constant-step SGD; return ``(params, per_epoch_mean_loss)``.

    Each epoch visits ``data`` in a fresh permutation drawn from
    ``(shuffle_seed, epoch)``.  The final batch of an epoch may be short; the
    callable is expected to return a batch *mean* so short batches are not
    over-weighted.  The epoch loss is the sample-weighted mean of the batch
    losses, measured before each step.
    """
    theta = np.array(params, dtype=np.float64)
    data = np.asarray(data, dtype=np.int64)
    if data.size == 0:
        raise ValueError("no data to train on")
    trace = []
    for epoch in range(sched.epochs):
        order = data[rng(sched.shuffle_seed, epoch).permutation(data.size)]
        total = 0.0
        for b, start in enumerate(range(0, order.size, sched.batch_size)):
            batch = order[start:start + sched.batch_size]
            loss, grad = loss_and_grad(theta, batch)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, b, "loss")
            if not np.all(np.isfinite(grad)):
                raise DivergenceError(epoch, b, "gradient")
            theta -= sched.learning_rate * grad
            total += loss * batch.size
        trace.append(total / order.size)
    return theta, np.array(trace)


def finite_diff_gradient(loss: Callable[[np.ndarray], float], params, step: float = 1e-6) -> np.ndarray:
    """Central differences ``(L(t + h e_i) - L(t - h e_i)) / 2h`` per coordinate."""
    theta = np.array(params, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss(theta)
        flat[i] = orig - step
        down = loss(theta)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite loss evaluating coordinate {i}")
        grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(theta.shape)
