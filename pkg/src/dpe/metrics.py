"""Worst-group, balanced, and overall accuracy."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .ensemble import EnsembleModel, predict
from .store import FeatureStore


@dataclass(frozen=True)
class EvalReport:
    """Accuracy summary of one model on one store.

    When the store has no group labels the groups are the classes, so the
    worst-group figure is really worst-class accuracy; ``group_source`` is
    then ``"class"``.
    """

    per_group_accuracy: dict[int, float]
    n_per_group: dict[int, int]
    per_class_accuracy: dict[int, float]
    worst_group_accuracy: float
    balanced_accuracy: float
    overall_accuracy: float
    n_samples: int
    group_source: str = "group"

    @property
    def worst_group(self) -> int:
        return min(self.per_group_accuracy, key=lambda g: (self.per_group_accuracy[g], g))

    def to_text(self) -> str:
        lines = [
            f"group_source={self.group_source}",
            f"n_samples={self.n_samples}",
            f"worst_group_accuracy={self.worst_group_accuracy!r}",
            f"worst_group={self.worst_group}",
            f"balanced_accuracy={self.balanced_accuracy!r}",
            f"overall_accuracy={self.overall_accuracy!r}",
        ]
        for g in sorted(self.per_group_accuracy):
            lines.append(f"group_{g}_accuracy={self.per_group_accuracy[g]!r}")
            lines.append(f"group_{g}_count={self.n_per_group[g]}")
        for c in sorted(self.per_class_accuracy):
            lines.append(f"class_{c}_accuracy={self.per_class_accuracy[c]!r}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        """One row per group, header ``group,count,accuracy``; summary rows use
        the group names ``worst``, ``balanced`` and ``overall``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "count", "accuracy"])
        for g in sorted(self.per_group_accuracy):
            w.writerow([g, self.n_per_group[g], repr(self.per_group_accuracy[g])])
        w.writerow(["worst", self.n_per_group[self.worst_group], repr(self.worst_group_accuracy)])
        w.writerow(["balanced", self.n_samples, repr(self.balanced_accuracy)])
        w.writerow(["overall", self.n_samples, repr(self.overall_accuracy)])
        return buf.getvalue()


def report_from_predictions(predictions, store: FeatureStore) -> EvalReport:
    pred = np.asarray(predictions)
    if pred.shape != (store.n_samples,):
        raise ValueError(f"expected {store.n_samples} predictions, got shape {pred.shape}")
    correct = pred == store.labels
    if store.has_groups:
        present = np.unique(store.groups)
        if present.size < store.n_groups:
            gaps = np.flatnonzero(present != np.arange(present.size))
            first = int(gaps[0]) if gaps.size else int(present.size)
            raise ValueError(f"group {first} has no samples")
        keys, source = store.groups, "group"
    else:
        keys, source = store.labels, "class"
    per_group, counts = {}, {}
    for g in np.unique(keys):
        mask = keys == g
        per_group[int(g)] = float(correct[mask].mean())
        counts[int(g)] = int(mask.sum())
    per_class = {c: float(correct[store.labels == c].mean()) for c in range(store.n_classes)}
    return EvalReport(
        per_group_accuracy=per_group,
        n_per_group=counts,
        per_class_accuracy=per_class,
        worst_group_accuracy=min(per_group.values()),
        balanced_accuracy=float(np.mean(list(per_class.values()))),
        overall_accuracy=float(correct.mean()),
        n_samples=store.n_samples,
        group_source=source,
    )


def evaluate(model, store: FeatureStore) -> EvalReport:
    """Score ``model`` (anything with a ``predict(features)`` method or an
    :class:`~dpe.ensemble.EnsembleModel`) on ``store``."""
    if isinstance(model, EnsembleModel):
        if model.dim != store.dim:
            raise ValueError(f"model dim {model.dim} != store dim {store.dim}")
        if model.n_classes != store.n_classes:
            raise ValueError(f"model has {model.n_classes} classes, store has {store.n_classes}")
        pred = predict(store.features, model)
    else:
        pred = model.predict(store.features)
    return report_from_predictions(pred, store)
