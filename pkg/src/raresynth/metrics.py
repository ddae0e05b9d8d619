"""Imbalanced binary classification metrics and stratified fold plans."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import InvalidArgument
from .rng import numpy_rng


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise InvalidArgument("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InvalidArgument(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.isin(y, (0, 1)).all():
        raise InvalidArgument("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion_at_threshold(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Predict positive iff ``score >= threshold``."""
    s, y = _pair(scores, labels)
    if not 0.0 <= threshold <= 1.0:
        raise InvalidArgument(f"threshold must be in [0, 1], got {threshold}")
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return ConfusionCounts(tp, fp, fn, tn)


def f1_precision_recall(c: ConfusionCounts) -> tuple[float, float, float]:
    """Positive-class ``(f1, precision, recall)``; any 0/0 is defined as 0."""
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def ap_from_counts(tp: Sequence[int], fp: Sequence[int], n_pos: int) -> float:
    """Average precision from cumulative counts at successive cut points.

    ``tp[k]``, ``fp[k]`` are the counts of positives/negatives scoring at or
    above the k-th distinct score, in descending score order. Each term is
    ``((tp[k] - tp[k-1]) / n_pos) * (tp[k] / (tp[k] + fp[k]))``. Terms are
    accumulated as exact rationals and rounded once, so the result is the
    correctly rounded value of the true sum.
    """
    total = Fraction(0)
    prev = 0
    for t, f in zip(tp, fp):
        t, f = int(t), int(f)
        if t != prev:
            total += Fraction(t - prev, n_pos) * Fraction(t, t + f)
        prev = t
    return float(total)


def pr_auc(scores, labels) -> float:
    """Non-interpolated average precision with grouped ties.

    Samples are ranked by descending score; all samples sharing a score enter
    together, so precision and recall are only read after a whole tie group.
    The value is invariant to any permutation of the inputs.
    """
    s, y = _pair(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise InvalidArgument("average precision is undefined without positives")
    if not np.all(np.isfinite(s)):
        raise InvalidArgument("non-finite scores")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of each tie group
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    return ap_from_counts(tp[ends], fp[ends], n_pos)


# ---------------------------------------------------------------------------
# Cross-validation


@dataclass(frozen=True)
class FoldPlan:
    k: int
    test_indices: tuple[tuple[int, ...], ...]
    seed: int

    def train_indices(self, fold: int) -> tuple[int, ...]:
        held = set(self.test_indices[fold])
        n = sum(len(f) for f in self.test_indices)
        return tuple(i for i in range(n) if i not in held)


def stratified_kfold(labels, k: int, seed: int) -> FoldPlan:
    """Shuffle each class, then deal indices to folds round-robin.

    The positive class is dealt first starting at fold 0; the negatives continue
    where the positives stopped, which keeps total fold sizes within one of
    each other as well.
    """
    y = np.asarray(labels).ravel()
    n = y.size
    if k < 2:
        raise InvalidArgument(f"k must be >= 2, got {k}")
    if k > n:
        raise InvalidArgument(f"k={k} exceeds sample count {n}")
    if not np.isin(y, (0, 1)).all():
        raise InvalidArgument("labels must be 0 or 1")
    rng = numpy_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for cls in (1, 0):
        idx = np.flatnonzero(y == cls)
        if 0 < idx.size < k:
            warnings.warn(f"class {cls} has {idx.size} samples, fewer than k={k}; some folds will lack it", stacklevel=2)
        rng.shuffle(idx)
        for i in idx:
            folds[cursor % k].append(int(i))
            cursor += 1
    return FoldPlan(k=k, test_indices=tuple(tuple(sorted(f)) for f in folds), seed=seed)
