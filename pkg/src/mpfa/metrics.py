"""Ranking metrics for link prediction; ties are handled by midranks."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, UndefinedMetricError


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DimensionError(f"{len(s)} scores vs {len(y)} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def _require_both_classes(y: np.ndarray, what: str) -> None:
    if y.sum() == 0 or y.sum() == len(y):
        raise UndefinedMetricError(f"{what} needs at least one positive and one negative label")


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ascending ranks; tied values share the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    starts = np.r_[0, np.nonzero(np.diff(sorted_vals))[0] + 1]
    ends = np.r_[starts[1:], len(values)]
    group_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(values))
    ranks[order] = np.repeat(group_rank, ends - starts)
    return ranks


def metric_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    s, y = _check(scores, labels)
    _require_both_classes(y, "AUC")
    ranks = midranks(s)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metric_ap(scores, labels) -> float:
    """Mean precision at each positive's rank, in descending score order.

    A positive inside a tie group sits at the group's midrank, both among
    all items and among the positives.
    """
    s, y = _check(scores, labels)
    _require_both_classes(y, "AP")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    starts = np.r_[0, np.nonzero(np.diff(s_sorted))[0] + 1]
    ends = np.r_[starts[1:], len(s)]
    pos_in_group = np.add.reduceat(y_sorted, starts)
    pos_before = np.r_[0, np.cumsum(pos_in_group)[:-1]]
    size = ends - starts
    precision = (pos_before + (pos_in_group + 1) / 2.0) / (starts + (size + 1) / 2.0)
    return float((pos_in_group * precision).sum() / y.sum())


def metric_acc(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of items whose thresholded score (``>= threshold``) matches the label."""
    s, y = _check(scores, labels)
    if len(s) == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return float(((s >= threshold).astype(np.int64) == y).mean())


def link_metrics(pos_scores, neg_scores) -> dict[str, float]:
    scores = np.concatenate([np.asarray(pos_scores, float), np.asarray(neg_scores, float)])
    labels = np.r_[np.ones(len(pos_scores), dtype=np.int64), np.zeros(len(neg_scores), dtype=np.int64)]
    return {"ap": metric_ap(scores, labels), "auc": metric_auc(scores, labels), "acc": metric_acc(scores, labels)}
