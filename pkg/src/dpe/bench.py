"""Ensemble-size sweeps, hyperparameter grids and diversification ablations.

Every routine trains from explicit seeds and returns rows in a fixed order, so
two calls with the same arguments produce identical tables.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .config import DIVERSIFICATION, TrainConfig
from .ensemble import EnsembleModel, mean_offdiag_abs_cosine, train_ensemble
from .metrics import evaluate
from .probe import linear_probe
from .store import FeatureStore

SENSITIVITY_INV_TEMPERATURES = (10.0, 20.0, 30.0, 40.0)
SENSITIVITY_IPS_WEIGHTS = (1e4, 5e4, 1e5, 5e5)


def benchmark_config(**overrides) -> TrainConfig:
    """Training settings used for the synthetic benchmark.

    Same as :class:`TrainConfig` except for a smaller step and batch, which
    suit the few hundred samples and 64 dimensions of the synthetic stores.
    """
    base = TrainConfig(learning_rate=1e-4, batch_size=64)
    return replace(base, **overrides)


@dataclass(frozen=True)
class SizeRow:
    n_members: int
    worst_group_accuracy: float
    balanced_accuracy: float
    overall_accuracy: float
    delta: float  # percent change of WGA relative to N=1


@dataclass(frozen=True)
class SensitivityRow:
    inv_temperature: float
    ips_weight: float
    worst_group_accuracy: float
    overall_accuracy: float


@dataclass(frozen=True)
class AblationRow:
    arm: str
    seed: int
    n_members: int
    worst_group_accuracy: float
    balanced_accuracy: float
    overall_accuracy: float
    mean_abs_cosine: float


def rows_to_csv(rows) -> str:
    """Comma-separated table; the header is the row dataclass field names."""
    if not rows:
        raise ValueError("no rows")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in fields(rows[0])])
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
    return buf.getvalue()


def _check_sizes(sizes) -> list[int]:
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ValueError("sizes must be non-empty")
    if sizes[0] < 1 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"sizes must be strictly ascending and >= 1, got {sizes}")
    return sizes


def _relative_gain(wga: float, wga1: float) -> float:
    if wga1 == 0.0:
        return 0.0 if wga == 0.0 else float("inf")
    return (wga - wga1) / wga1 * 100.0


def size_table(model: EnsembleModel, test: FeatureStore, sizes) -> list[SizeRow]:
    """Evaluate nested prefixes of an already trained ensemble."""
    sizes = _check_sizes(sizes)
    if sizes[-1] > model.n_members:
        raise ValueError(f"model has {model.n_members} members, sizes ask for {sizes[-1]}")
    wga1 = evaluate(model.prefix(1), test).worst_group_accuracy
    rows = []
    for n in sizes:
        r = evaluate(model.prefix(n), test)
        rows.append(SizeRow(n, r.worst_group_accuracy, r.balanced_accuracy, r.overall_accuracy,
                            _relative_gain(r.worst_group_accuracy, wga1)))
    return rows


def sweep_ensemble_size(train: FeatureStore, test: FeatureStore, cfg: TrainConfig, sizes) -> list[SizeRow]:
    """Train once with ``max(sizes)`` members and score each prefix.

    Members never change after their stage, so the first ``n`` members of a
    long run are exactly the ensemble a run with ``n_members=n`` would build.
    """
    sizes = _check_sizes(sizes)
    model = train_ensemble(train, cfg, n_members=sizes[-1])
    return size_table(model, test, sizes)


def sweep_sensitivity(train: FeatureStore, test: FeatureStore, cfg: TrainConfig,
                      inv_temperatures=SENSITIVITY_INV_TEMPERATURES,
                      ips_weights=SENSITIVITY_IPS_WEIGHTS) -> list[SensitivityRow]:
    """One full train and evaluate per grid point, rows in (1/tau, alpha) order."""
    if not len(inv_temperatures) or not len(ips_weights):
        raise ValueError("empty grid")
    rows = []
    for it in inv_temperatures:
        for a in ips_weights:
            model = train_ensemble(train, replace(cfg, inv_temperature=float(it), ips_weight=float(a)))
            r = evaluate(model, test)
            rows.append(SensitivityRow(float(it), float(a), r.worst_group_accuracy, r.overall_accuracy))
    return rows


def run_ablation(train: FeatureStore, test: FeatureStore, cfg: TrainConfig, seeds, sizes,
                 arms=DIVERSIFICATION) -> list[AblationRow]:
    """Every arm for every seed, scored at every prefix size.

    ``cfg`` must be a ``sampling_plus_ips`` config; the other arms are
    derived from it so they share everything but the diversification.
    """
    sizes = _check_sizes(sizes)
    rows = []
    for arm in arms:
        for seed in seeds:
            c = replace(cfg.with_arm(arm), seed=int(seed))
            model = train_ensemble(train, c, n_members=sizes[-1])
            for n in sizes:
                sub = model.prefix(n)
                r = evaluate(sub, test)
                rows.append(AblationRow(arm, int(seed), n, r.worst_group_accuracy, r.balanced_accuracy,
                                        r.overall_accuracy, mean_offdiag_abs_cosine(sub)))
    return rows


def summarize_ablation(rows: list[AblationRow]) -> dict[tuple[str, int], float]:
    """Mean WGA over seeds for each (arm, n_members)."""
    acc: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        acc.setdefault((r.arm, r.n_members), []).append(r.worst_group_accuracy)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def probe_reference(train: FeatureStore, test: FeatureStore, cfg: TrainConfig | None = None, seed: int = 0):
    """Linear-probe report, the plain ERM head the ensemble is compared to."""
    return linear_probe(train, test, cfg or benchmark_config(), seed)
