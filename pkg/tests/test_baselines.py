import numpy as np
import pytest

from mpfa.baselines import EdgeBankScorer, EdgeMemory, RandomScorer, edgebank_score
from mpfa.events import chronological_split, synth_recurrent
from mpfa.metrics import link_metrics
from mpfa.training import evaluate_linkpred


def test_edgebank_unseen_then_seen():
    mem = EdgeMemory()
    assert edgebank_score(0, 1, 1.0, mem) == 0.0
    mem.insert(0, 1, 1.0)
    assert edgebank_score(0, 1, 2.0, mem) == 1.0
    # directed: the reverse pair is unseen
    assert edgebank_score(1, 0, 2.0, mem) == 0.0
    assert len(mem) == 1


def test_edgebank_window_forgets():
    mem = EdgeMemory(window=5.0)
    mem.insert(0, 1, 1.0)
    assert mem.contains(0, 1, 6.0)
    assert not mem.contains(0, 1, 6.5)
    mem.insert(0, 1, 6.0)
    mem.insert(0, 1, 3.0)  # older sighting does not move the clock back
    assert mem.contains(0, 1, 11.0)


def test_edgebank_scores_are_binary_and_leak_free():
    stream = synth_recurrent(40, 2000, seed=3)
    plan = chronological_split(stream)
    eb = EdgeBankScorer()
    eb.warm(stream, plan.train_events(), plan.train.stop)
    idx = np.arange(plan.val.start, plan.val.start + 200)
    pos, neg = eb.score(stream, idx, stream.dst[idx][::-1].copy())
    assert set(np.unique(np.r_[pos, neg])) <= {0.0, 1.0}
    # a scored pair is positive only if it occurred strictly earlier in the stream
    seen = {(int(s), int(d)) for s, d in zip(stream.src[:plan.train.stop], stream.dst[:plan.train.stop])}
    for i, p in zip(idx, pos):
        assert p == float((int(stream.src[i]), int(stream.dst[i])) in seen)


def test_edgebank_reports_are_deterministic():
    stream = synth_recurrent(40, 2000, seed=3)
    plan = chronological_split(stream)

    def run():
        eb = EdgeBankScorer()
        eb.warm(stream, plan.train_events(), plan.train.stop)
        evaluate_linkpred(eb, stream, plan.val, plan, seed=1)
        return evaluate_linkpred(eb, stream, plan.test, plan, seed=2).metrics()

    assert run() == run()


def test_edgebank_beats_chance_on_recurrent_stream():
    stream = synth_recurrent(100, 5000, recurrence_prob=0.9, seed=0)
    plan = chronological_split(stream)
    eb = EdgeBankScorer()
    eb.warm(stream, plan.train_events(), plan.train.stop)
    evaluate_linkpred(eb, stream, plan.val, plan)
    assert evaluate_linkpred(eb, stream, plan.test, plan).ap > 0.75


def test_random_scores_chance_level():
    stream = synth_recurrent(10, 10, seed=0)
    rnd = RandomScorer(7)
    idx = np.zeros(10_000, dtype=np.int64)
    pos, neg = rnd.score(stream.subset(np.arange(1)), idx, idx)
    m = link_metrics(pos, neg)
    assert abs(m["auc"] - 0.5) < 0.02
    # balanced labels: AP sits near the positive prevalence
    assert abs(m["ap"] - 0.5) < 0.02
    assert np.all((pos >= 0) & (pos < 1))


def test_random_same_seed_same_scores():
    idx = np.zeros(50, dtype=np.int64)
    stream = synth_recurrent(10, 10, seed=0)
    a = RandomScorer(3).score(stream, idx, idx)
    b = RandomScorer(3).score(stream, idx, idx)
    c = RandomScorer(4).score(stream, idx, idx)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


@pytest.mark.parametrize("prevalence", [0.2, 0.5])
def test_random_ap_tracks_prevalence(prevalence):
    rng = np.random.default_rng(0)
    n = 20_000
    n_pos = int(n * prevalence)
    scores = rng.random(n)
    from mpfa.metrics import metric_ap

    y = np.r_[np.ones(n_pos), np.zeros(n - n_pos)]
    assert abs(metric_ap(scores, y) - prevalence) < 0.02
