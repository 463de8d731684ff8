"""
Task metrics computed from exact integer counts and ranks.

Accuracy, F1, Matthews and Spearman are evaluated with integer arithmetic and
a single correctly rounded conversion at the end. As a consequence the value
for a prediction list repeated ``m`` times is bit-identical to the value for
a single copy.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .errors import InputError

METRIC_KINDS = ("accuracy", "f1_binary", "matthews", "spearman")


def _pair(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise InputError(f"predictions ({p.size}) and labels ({y.size}) differ in length")
    if p.size == 0:
        raise InputError("metrics need at least one prediction")
    return p, y


def accuracy(predictions, labels) -> float:
    p, y = _pair(predictions, labels)
    return int(np.sum(p == y)) / p.size


def _confusion(p: np.ndarray, y: np.ndarray) -> tuple[int, int, int, int]:
    p1, y1 = p == 1, y == 1
    tp = int(np.sum(p1 & y1))
    fp = int(np.sum(p1 & ~y1))
    fn = int(np.sum(~p1 & y1))
    tn = int(np.sum(~p1 & ~y1))
    return tp, fp, fn, tn


def f1_binary(predictions, labels) -> float:
    """F1 of the positive class (label 1); 0 when there are no true or predicted positives."""
    tp, fp, fn, _ = _confusion(*_pair(predictions, labels))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else (2 * tp) / denom


def matthews(predictions, labels) -> float:
    """Binary Matthews correlation; 0 when any confusion-matrix marginal is zero."""
    tp, fp, fn, tn = _confusion(*_pair(predictions, labels))
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    num = tp * tn - fp * fn
    return math.copysign(math.sqrt(Fraction(num * num, den)), num)


def _doubled_midranks(x: np.ndarray) -> np.ndarray:
    """2 * (number below) + (number equal): an affine image of the average ranks."""
    uniq, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    below = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return (2 * below + counts)[inverse].astype(np.int64)


def spearman(predictions, labels) -> float:
    """Spearman rank correlation with average ranks for ties; 0 if either side is constant."""
    p, y = _pair(predictions, labels)
    a = _doubled_midranks(p.astype(np.float64))
    b = _doubled_midranks(y.astype(np.float64))
    n = a.size
    sa, sb = int(a.sum()), int(b.sum())
    cov = n * int(np.dot(a, b)) - sa * sb
    va = n * int(np.dot(a, a)) - sa * sa
    vb = n * int(np.dot(b, b)) - sb * sb
    if va == 0 or vb == 0:
        return 0.0
    return math.copysign(math.sqrt(Fraction(cov * cov, va * vb)), cov)


_METRICS = {"accuracy": accuracy, "f1_binary": f1_binary, "matthews": matthews, "spearman": spearman}


def metric(kind: str, predictions, labels) -> float:
    try:
        fn = _METRICS[kind]
    except KeyError:
        raise InputError(f"unknown metric {kind!r}; choose from {', '.join(METRIC_KINDS)}") from None
    return fn(predictions, labels)


def metric_for_task(task: str, regression: bool) -> str:
    """Metric per GLUE convention: Spearman for regression, F1 for paraphrase-style pair
    tasks, Matthews for acceptability, accuracy otherwise."""
    name = task.lower()
    if regression:
        return "spearman"
    if any(tag in name for tag in ("qqp", "mrpc", "pair-overlap", "paraphrase")):
        return "f1_binary"
    if any(tag in name for tag in ("cola", "acceptab")):
        return "matthews"
    return "accuracy"
