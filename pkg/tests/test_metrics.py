import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpfa.errors import DimensionError, UndefinedMetricError
from mpfa.metrics import link_metrics, metric_acc, metric_ap, metric_auc, midranks


def brute_auc(s, y):
    """All (positive, negative) pairs; a tie counts one half."""
    pos, neg = s[y == 1], s[y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def brute_ap(s, y):
    """Precision at each positive's rank, with every tied item placed at the tie midpoint."""
    precisions = []
    for i in np.nonzero(y == 1)[0]:
        above = sum(1 for j in range(len(s)) if s[j] > s[i])
        tied = sum(1 for j in range(len(s)) if s[j] == s[i])
        pos_above = sum(1 for j in range(len(s)) if y[j] == 1 and s[j] > s[i])
        pos_tied = sum(1 for j in range(len(s)) if y[j] == 1 and s[j] == s[i])
        precisions.append((pos_above + (pos_tied + 1) / 2) / (above + (tied + 1) / 2))
    return float(np.mean(precisions))


def cumulative_ap(s, y):
    """Textbook AP on distinct scores: walk the ranking, average precision at each hit."""
    order = np.argsort(-s)
    hits, total = 0, 0.0
    for rank, idx in enumerate(order, start=1):
        if y[idx]:
            hits += 1
            total += hits / rank
    return total / hits


def random_instance(rng):
    n = int(rng.integers(2, 201))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 1, 0
    # coarse rounding on some instances to create many ties
    s = rng.random(n)
    if rng.random() < 0.5:
        s = np.round(s, int(rng.integers(0, 2)))
    return s, y


def test_worked_ap_example():
    assert metric_ap([0.9, 0.8, 0.3], [1, 0, 1]) == pytest.approx((1 / 1 + 2 / 3) / 2, abs=1e-12)


def test_trivial_auc_and_perfect_scores():
    assert metric_auc([0.9, 0.1], [1, 0]) == 1.0
    m = link_metrics(np.ones(10), np.zeros(10))
    assert m == {"ap": 1.0, "auc": 1.0, "acc": 1.0}


def test_constant_scores():
    y = np.array([1, 0] * 5)
    s = np.full(10, 0.7)
    assert metric_acc(s, y) == 0.5
    assert metric_auc(s, y) == 0.5
    # every item sits at the midrank of one tie group: ((P + 1) / 2) / ((N + 1) / 2)
    assert metric_ap(s, y) == pytest.approx(6 / 11, abs=1e-12)


def test_metrics_match_brute_force_on_1000_instances():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        s, y = random_instance(rng)
        worst = max(worst, abs(metric_auc(s, y) - brute_auc(s, y)), abs(metric_ap(s, y) - brute_ap(s, y)))
    assert worst < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=60, unique_by=lambda p: p[0]))
def test_ap_without_ties_is_cumulative_precision(pairs):
    s = np.array([p[0] for p in pairs])
    y = np.array([int(p[1]) for p in pairs])
    if y.min() == y.max():
        return
    assert abs(metric_ap(s, y) - cumulative_ap(s, y)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=40), st.integers(0, 10_000))
def test_metrics_in_unit_interval(raw, seed):
    s = np.array(raw, dtype=float) / 5
    y = np.random.default_rng(seed).integers(0, 2, len(s))
    y[0], y[1] = 0, 1
    for f in (metric_ap, metric_auc, metric_acc):
        assert 0.0 <= f(s, y) <= 1.0


def test_midranks():
    assert midranks(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_undefined_and_mismatch_errors():
    with pytest.raises(UndefinedMetricError):
        metric_ap([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        metric_auc([0.1, 0.2], [0, 0])
    with pytest.raises(DimensionError):
        metric_auc([0.1, 0.2, 0.3], [0, 1])


def test_acc_threshold_is_inclusive():
    assert metric_acc([0.5, 0.49], [1, 0]) == 1.0


def test_random_scores_auc_near_half():
    rng = np.random.default_rng(0)
    m = link_metrics(rng.random(10_000), rng.random(10_000))
    assert abs(m["auc"] - 0.5) < 0.02
    assert abs(m["ap"] - 0.5) < 0.02
