from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

THRESHOLD = 0.5


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> Optional[float]:
    """Probability a random positive outscores a random negative (ties count 1/2).

    Rank-sum form of the pairwise statistic; None when only one class is present.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = midranks(scores)
    u = r[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class MetricsRow:
    accuracy: float
    auc: Optional[float]
    precision: float
    recall: float
    f1: float
    relevant_features: Optional[int] = None
    flags: tuple[str, ...] = field(default=())

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "relevant_features": self.relevant_features,
            "flags": ";".join(self.flags),
        }


def binary_metrics(scores, labels, relevant_features: Optional[int] = None) -> MetricsRow:
    """Accuracy, AUC and precision/recall/F1 at a 0.5 score threshold.

    Zero denominators give 0 plus a flag (``precision_undefined``,
    ``recall_undefined``); a one-class test set leaves AUC as None with
    ``auc_undefined``.
    """
    scores = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    pred = (scores >= THRESHOLD).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append("precision_undefined")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append("recall_undefined")
    else:
        recall = tp / (tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision > 0 and recall > 0 else 0.0
    auc = roc_auc(scores, y)
    if auc is None:
        flags.append("auc_undefined")
    return MetricsRow(float((pred == y).mean()), auc, precision, recall, f1, relevant_features, tuple(flags))
