"""Confusion counts, accuracy/precision/recall/F1 and task-level intervals."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field

import numpy as np

METRICS = ("accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class MetricSummary:
    mean: float | None
    halfwidth: float | None
    n: int
    excluded: int = 0

    def format(self, digits: int = 3) -> str:
        if self.mean is None:
            return "undefined"
        hw = 0.0 if self.halfwidth is None else self.halfwidth
        return f"{self.mean:.{digits}f}±{hw:.{digits}f}"


@dataclass
class MetricsReport:
    n_tasks: int
    summaries: dict[str, MetricSummary] = field(default_factory=dict)

    def __getitem__(self, name: str) -> MetricSummary:
        return self.summaries[name]

    def to_dict(self) -> dict:
        return {
            "n_tasks": self.n_tasks,
            **{k: vars(v).copy() for k, v in self.summaries.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(d["n_tasks"], {k: MetricSummary(**d[k]) for k in METRICS if k in d})


def confusion(predictions, labels, positive_class: int) -> ConfusionCounts:
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.shape != true.shape:
        raise ValueError("predictions and labels differ in length")
    pp, ap = pred == positive_class, true == positive_class
    return ConfusionCounts(
        tp=int(np.sum(pp & ap)), fp=int(np.sum(pp & ~ap)),
        fn=int(np.sum(~pp & ap)), tn=int(np.sum(~pp & ~ap)),
    )


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def indicators(c: ConfusionCounts) -> dict[str, float | None]:
    """The four indicators; ``None`` marks a zero denominator."""
    if c.total == 0:
        raise ValueError("no evaluated examples")
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return {
        "accuracy": (c.tp + c.tn) / c.total,
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


def _bootstrap_halfwidth(values, confidence, rng, resamples=2000):
    arr = np.asarray(values)
    means = rng.choice(arr, size=(resamples, arr.size), replace=True).mean(axis=1)
    lo, hi = np.quantile(means, [(1 - confidence) / 2, (1 + confidence) / 2])
    return float(hi - lo) / 2


def aggregate(per_task: list[dict[str, float | None]], confidence: float = 0.95,
              method: str = "normal", rng=None, strict: bool = True) -> MetricsReport:
    """Mean over tasks with a normal-approximation interval (z * s / sqrt(n)).

    Undefined entries are skipped and counted in ``excluded``.  With
    ``method="bootstrap"`` the half-width is half the percentile interval of
    resampled means instead.  ``strict=False`` reports a metric with fewer
    than two defined values as undefined instead of raising.
    """
    if method not in ("normal", "bootstrap"):
        raise ValueError(f"unknown interval method {method!r}")
    z = statistics.NormalDist().inv_cdf(0.5 + confidence / 2)
    report = MetricsReport(n_tasks=len(per_task))
    for name in METRICS:
        values = [r[name] for r in per_task if r.get(name) is not None]
        if len(values) < 2:
            if not strict:
                report.summaries[name] = MetricSummary(None, None, len(values), len(per_task) - len(values))
                continue
            raise ValueError(f"{name}: need at least 2 defined values, got {len(values)}")
        mean = math.fsum(values) / len(values)
        if method == "normal":
            hw = z * statistics.stdev(values) / math.sqrt(len(values))
        else:
            hw = _bootstrap_halfwidth(values, confidence, np.random.default_rng(rng))
        report.summaries[name] = MetricSummary(mean, hw, len(values), len(per_task) - len(values))
    return report


def summarize_episodes(results, positives) -> tuple[list[dict], MetricsReport]:
    """Per-task indicators for ``evaluate`` output; ``positives`` is per episode."""
    per_task = [indicators(confusion(p, y, pos)) for (p, y), pos in zip(results, positives)]
    return per_task, aggregate(per_task, strict=False)
