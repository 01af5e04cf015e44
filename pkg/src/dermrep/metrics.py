"""ROC curves, AUC, and fold aggregation."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DegenerateMetricError(ValueError):
    pass


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    y = y.astype(int)
    if y.sum() == 0 or y.sum() == y.size:
        raise DegenerateMetricError("ROC needs at least one positive and one negative")
    return s, y


def _roc_counts(scores, labels) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Cumulative (fp, tp) integer counts at each distinct threshold, high to low."""
    s, y = _validate(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of tied scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.r_[0, np.cumsum(y)[last]]
    fp = np.r_[0, np.cumsum(1 - y)[last]]
    return fp, tp, int(y.size - y.sum()), int(y.sum())


def roc_curve(scores, labels) -> list[tuple[float, float]]:
    """ROC vertices ``(fpr, tpr)`` from (0, 0) to (1, 1); tied scores share a vertex."""
    fp, tp, n_neg, n_pos = _roc_counts(scores, labels)
    return [(f / n_neg, t / n_pos) for f, t in zip(fp.tolist(), tp.tolist())]


def auc(scores, labels) -> float:
    """Trapezoidal area under :func:`roc_curve`.

    Summed in integers (twice the area times n_pos*n_neg), so the result is
    exactly the Mann-Whitney statistic with ties counted one half.
    """
    fp, tp, n_neg, n_pos = _roc_counts(scores, labels)
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * n_pos * n_neg)


def mann_whitney_auc(scores, labels) -> float:
    """O(n_pos * n_neg) pairwise count; reference for :func:`auc`."""
    s, y = _validate(scores, labels)
    pos = s[y == 1]
    neg = s[y == 0]
    wins = 0
    ties = 0
    for a in pos:
        for b in neg:
            if a > b:
                wins += 1
            elif a == b:
                ties += 1
    return (2 * wins + ties) / (2 * pos.size * neg.size)


@dataclass
class FoldReport:
    fold: int
    auc: float
    n_pos: int
    n_neg: int
    roc: list[tuple[float, float]] = field(default_factory=list)

    @classmethod
    def from_scores(cls, fold: int, scores, labels) -> "FoldReport":
        y = np.asarray(labels).astype(int)
        return cls(fold, auc(scores, y), int(y.sum()), int(y.size - y.sum()), roc_curve(scores, y))

    def to_json(self) -> dict:
        return {
            "fold": self.fold,
            "auc": self.auc,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "roc": [[f, t] for f, t in self.roc],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FoldReport":
        return cls(int(obj["fold"]), float(obj["auc"]), int(obj["n_pos"]), int(obj["n_neg"]),
                   [(float(f), float(t)) for f, t in obj["roc"]])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


def aggregate(reports: Sequence[FoldReport | float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation of fold AUCs.

    A single fold gives std 0 with a warning.
    """
    values = [r.auc if isinstance(r, FoldReport) else float(r) for r in reports]
    if not values:
        raise ValueError("aggregate needs at least one fold")
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        warnings.warn("single fold: standard deviation reported as 0", stacklevel=2)
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)
