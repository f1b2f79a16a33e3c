"""Confusion matrices and the OA / AA / Kappa suite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError


class ConfusionMatrix:
    """``C x C`` counts; rows are true classes, columns predictions."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise MetricError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise MetricError("confusion matrix counts must be non-negative")
        self.counts = counts

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(cm, (np.asarray(y_true, int), np.asarray(y_pred, int)), 1)
        return cls(cm)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def per_class_recall(self) -> list[float | None]:
        rows = self.counts.sum(axis=1)
        return [float(self.counts[i, i] / r) if r else None for i, r in enumerate(rows)]


def _counts(cm) -> np.ndarray:
    c = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.int64)
    if c.size == 0 or c.sum() == 0:
        raise MetricError("metrics undefined for an empty confusion matrix")
    return c


def oa(cm) -> float:
    c = _counts(cm)
    return float(np.trace(c) / c.sum())


def aa(cm) -> float:
    """Mean per-class recall over classes that have true samples."""
    c = _counts(cm)
    rows = c.sum(axis=1)
    present = rows > 0
    return float(np.mean(np.diag(c)[present] / rows[present]))


def kappa(cm) -> float:
    """Cohen's kappa, ``(p_o - p_e) / (1 - p_e)``."""
    c = _counts(cm).astype(np.float64)
    n = c.sum()
    p_o = np.trace(c) / n
    p_e = float((c.sum(axis=1) * c.sum(axis=0)).sum() / (n * n))
    if p_e == 1.0:
        # single populated class predicted perfectly
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    per_class: list = field(default_factory=list)
    oa_std: float = 0.0
    aa_std: float = 0.0
    kappa_std: float = 0.0
    runs: list = field(default_factory=list)

    @classmethod
    def from_cm(cls, cm: ConfusionMatrix) -> "MetricsReport":
        return cls(oa(cm), aa(cm), kappa(cm), cm.per_class_recall())

    def to_dict(self) -> dict:
        d = {"OA": self.oa, "AA": self.aa, "Kappa": self.kappa, "per_class_recall": self.per_class}
        if self.runs:
            d.update({"OA_std": self.oa_std, "AA_std": self.aa_std, "Kappa_std": self.kappa_std,
                      "runs": [r.to_dict() for r in self.runs]})
        return d


def aggregate(reports: list[MetricsReport]) -> MetricsReport:
    """Mean and sample standard deviation (0 for a single run) of OA/AA/Kappa."""
    if not reports:
        raise MetricError("no runs to aggregate")

    def stats(key):
        v = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0

    (o, os_), (a, as_), (k, ks) = stats("oa"), stats("aa"), stats("kappa")
    per = []
    for cls_vals in zip(*[r.per_class for r in reports]):
        vals = [v for v in cls_vals if v is not None]
        per.append(float(np.mean(vals)) if vals else None)
    return MetricsReport(o, a, k, per, os_, as_, ks, list(reports))


def repeat_runs(experiment, n: int = 5, base_seed: int = 0) -> MetricsReport:
    """Run ``experiment(seed)`` for seeds ``base_seed + 0..n-1`` and aggregate."""
    return aggregate([experiment(base_seed + i) for i in range(n)])
