import json
import warnings

import numpy as np
import pytest

from mpfa import tensor as T
from mpfa.baselines import EdgeBankScorer, RandomScorer
from mpfa.errors import ConfigurationError, DimensionError, ProtocolError, UndefinedMetricError
from mpfa.events import EventStream, chronological_split, inductive_mask, synth_recurrent
from mpfa.seeds import derive_seed
from mpfa.tensor import Tensor, grad_check
from mpfa.training import (
    ABLATION_ORDER,
    EvalReport,
    MPFAScorer,
    TrainConfig,
    bce_loss,
    evaluate_linkpred,
    node_classification,
    run_ablations,
    sweep_neighbors,
    train,
    warm_state,
)

TINY = dict(emb_dim=8, time_dim=4, k_neighbors=3, batch_size=100, lr=3e-3)


@pytest.fixture(scope="module")
def stream():
    return synth_recurrent(30, 1500, recurrence_prob=0.9, seed=0)


@pytest.fixture(scope="module")
def plan(stream):
    return chronological_split(stream)


def test_bce_values_and_gradient():
    assert bce_loss(Tensor([0.0]), [1]).item() == pytest.approx(np.log(2), abs=1e-15)
    assert bce_loss(Tensor([40.0, -40.0]), [1, 0]).item() < 1e-15
    assert bce_loss(Tensor([1 - 1e-13]), [1], from_logits=False).item() < 1e-12
    rng = np.random.default_rng(0)
    s = Tensor(rng.normal(size=10))
    y = rng.integers(0, 2, 10)
    assert grad_check(lambda a: bce_loss(a, y), [s]) < 1e-6
    with pytest.raises(DimensionError):
        bce_loss(Tensor([0.0, 1.0]), [1])


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(ablation="everything")
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.warns(UserWarning):
        TrainConfig(dropout=0.25)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        TrainConfig(dropout=0.3)


def test_train_zero_lr_keeps_parameters(stream, plan):
    from mpfa.model import MPFA

    cfg = TrainConfig(**{**TINY, "lr": 0.0}, epochs=2)
    model = MPFA(cfg.model_config(stream), seed=derive_seed(cfg.seed, "init"))
    before = model.param_digest()
    result = train(stream, plan, cfg, model)
    assert result.model.param_digest() == before
    # negatives and dropout masks are redrawn per epoch, so losses differ slightly
    losses = result.report.curves["train_loss"]
    assert abs(losses[0] - losses[1]) < 1e-3


def test_train_learns_and_is_deterministic(stream, plan):
    cfg = TrainConfig(**TINY, epochs=2)
    a, b = train(stream, plan, cfg), train(stream, plan, cfg)
    assert a.report.curves == b.report.curves
    assert json.dumps(a.report.to_dict(), sort_keys=True) == json.dumps(b.report.to_dict(), sort_keys=True)
    assert a.report.curves["val_ap"][0] > 0.5
    assert 0 <= a.report.ap <= 1 and 0 <= a.report.auc <= 1 and 0 <= a.report.acc <= 1
    assert "seconds" not in a.report.to_dict()
    assert a.report.config == cfg.to_dict()


def test_early_stopping_restores_best(stream, plan):
    cfg = TrainConfig(**TINY, epochs=4, patience=1)
    result = train(stream, plan, cfg)
    best = result.report.extra["best_epoch"]
    assert result.report.extra["best_val_ap"] == max(result.report.curves["val_ap"])
    assert result.report.extra["epochs_run"] <= 4
    assert best == int(np.argmax(result.report.curves["val_ap"]))


def test_eval_does_not_mutate_params_and_replays(stream, plan):
    result = train(stream, plan, TrainConfig(**TINY, epochs=1))
    model = result.model
    digest = model.param_digest()
    reports = []
    for _ in range(2):
        state = model.new_state()
        state.restore(result.test_state)
        reports.append(evaluate_linkpred(MPFAScorer(model, state), stream, plan.test, plan, seed=5).metrics())
    assert model.param_digest() == digest
    assert reports[0] == reports[1]


def test_eval_protocol_error(stream, plan):
    result = train(stream, plan, TrainConfig(**TINY, epochs=1))
    with pytest.raises(ProtocolError):
        evaluate_linkpred(MPFAScorer(result.model, result.model.new_state()), stream, plan.test, plan)


def test_warm_state_matches_training_cursor(stream, plan):
    result = train(stream, plan, TrainConfig(**TINY, epochs=1))
    state = result.model.new_state()
    warm_state(result.model, state, stream, range(plan.test.start), 100)
    assert state.t_last.max() == stream.t[plan.test.start - 1]


def test_inductive_scores_only_masked_events(stream, plan):
    ind = inductive_mask(stream, plan, 0.2, seed=1)
    eb = EdgeBankScorer()
    eb.warm(stream, ind.train_events(), ind.train.stop)
    evaluate_linkpred(eb, stream, ind.val, ind, "inductive")
    report = evaluate_linkpred(eb, stream, ind.test, ind, "inductive")
    assert report.n_scored == int(ind.eval_mask(stream, ind.test).sum())
    assert report.n_scored < len(ind.test)


def test_inductive_training_reports_both(stream, plan):
    ind = inductive_mask(stream, plan, 0.2, seed=1)
    result = train(stream, ind, TrainConfig(**TINY, epochs=1, mode="inductive"))
    assert result.report.extra["mode"] == "inductive"
    assert set(result.report.extra["transductive"]) == {"ap", "auc", "acc"}


def test_perfect_and_random_scorers(stream, plan):
    class Oracle:
        cursor = plan.test.start

        def score(self, stream, index, neg):
            return np.ones(len(index)), np.zeros(len(index))

        def observe(self, stream, index):
            pass

    assert evaluate_linkpred(Oracle(), stream, plan.test, plan).metrics() == {"ap": 1.0, "auc": 1.0, "acc": 1.0}
    big = synth_recurrent(50, 20_000, seed=1)
    big_plan = chronological_split(big, 0.25, 0.25)
    rnd = RandomScorer(3)
    rnd.warm(big, big_plan.train_events(), big_plan.test.start)
    report = evaluate_linkpred(rnd, big, big_plan.test, big_plan)
    assert report.n_scored == 10_000
    assert abs(report.auc - 0.5) < 0.02


# ---------------------------------------------------------------------------
# node classification
# ---------------------------------------------------------------------------

def labelled(stream, labels):
    return EventStream(stream.src, stream.dst, stream.t, stream.edge_feat, stream.num_nodes, labels)


def test_node_classification_oracle_features(stream, plan):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, len(stream))
    s = labelled(stream, labels)
    report = node_classification(s, plan, features=labels[:, None].astype(float), epochs=30, lr=1e-2)
    assert report.auc == 1.0


def test_node_classification_shuffled_labels(stream, plan):
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, len(stream))
    feats = rng.normal(size=(len(stream), 6))
    report = node_classification(labelled(stream, labels), plan, features=feats, epochs=5)
    assert abs(report.auc - 0.5) < 0.1


def test_node_classification_errors(stream, plan):
    with pytest.raises(ConfigurationError):
        node_classification(stream, plan, features=np.zeros((len(stream), 1)))
    labels = np.zeros(len(stream), dtype=int)
    labels[plan.test.start] = 1
    with pytest.raises(ConfigurationError):
        node_classification(labelled(stream, labels), plan, features=np.zeros((len(stream), 1)))
    labels = np.r_[np.arange(plan.test.start) % 2, np.zeros(len(plan.test), dtype=int)]
    with pytest.raises(UndefinedMetricError):
        node_classification(labelled(stream, labels), plan, features=np.zeros((len(stream), 1)))


def test_node_classification_with_model(stream, plan):
    result = train(stream, plan, TrainConfig(**TINY, epochs=1))
    labels = (stream.src % 2).astype(int)
    report = node_classification(labelled(stream, labels), plan, result.model, epochs=3)
    assert 0 <= report.auc <= 1


# ---------------------------------------------------------------------------
# sweeps and ablations
# ---------------------------------------------------------------------------

def test_sweep_and_ablation_tables(stream, plan):
    cfg = TrainConfig(**TINY, epochs=1)
    rows = sweep_neighbors(stream, plan, cfg, [10])
    assert len(rows) == 1 and rows[0]["k_neighbors"] == 10
    table = run_ablations(stream, plan, cfg)
    assert [r["variant"] for r in table] == list(ABLATION_ORDER)
    assert len(ABLATION_ORDER) == 5


def test_report_serializable():
    r = EvalReport(0.5, 0.5, 0.5, 10, {"a": [1.0]}, 1.2, {"seed": 0}, "abc", {})
    d = r.to_dict()
    assert json.loads(json.dumps(d)) == d
    assert r.to_dict(include_timing=True)["seconds"] == 1.2


def test_loss_decreases_in_expectation():
    """Median epoch-3 train loss below epoch 1 across seeds."""
    drops = []
    for seed in range(5):
        s = synth_recurrent(30, 1000, seed=seed)
        result = train(s, chronological_split(s), TrainConfig(**TINY, epochs=3, patience=3, seed=seed))
        loss = result.report.curves["train_loss"]
        drops.append(loss[2] - loss[0])
    assert np.median(drops) < 0


def test_bce_matches_tensor_op():
    s = Tensor(np.array([0.3, -1.2]))
    assert bce_loss(s, [1, 0]).item() == T.bce_with_logits(s, np.array([1.0, 0.0])).item()
