"""Training, link-prediction evaluation, node classification, sweeps and ablations."""

from __future__ import annotations

import hashlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Protocol

import numpy as np

from . import tensor as T
from .errors import (
    ConfigurationError,
    DimensionError,
    NumericError,
    ProtocolError,
    UndefinedMetricError,
)
from .events import EventStream, SplitPlan, make_batches, negative_sample
from .metrics import link_metrics, metric_auc
from .model import ABLATIONS, MPFA, ModelConfig, ScoreResult
from .seeds import derive_seed, rng_for
from .state import TemporalState
from .tensor import Adam, Tape, Tensor

log = logging.getLogger(__name__)

DROPOUT_GRID = (0.0, 0.1, 0.2, 0.3, 0.4)


@dataclass
class TrainConfig:
    batch_size: int = 200
    lr: float = 1e-4
    epochs: int = 10
    patience: int = 5
    dropout: float = 0.0
    k_neighbors: int = 10
    emb_dim: int = 172
    mem_dim: int | None = None
    time_dim: int = 100
    seed: int = 0
    ablation: str = "full"
    train_frac: float = 0.70
    val_frac: float = 0.15
    mode: str = "transductive"
    inductive_fraction: float = 0.10

    def __post_init__(self):
        for name in ("batch_size", "epochs", "patience", "k_neighbors", "emb_dim", "time_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.mem_dim is not None and self.mem_dim < 1:
            raise ConfigurationError("mem_dim must be positive")
        if self.lr < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dropout not in DROPOUT_GRID:
            warnings.warn(f"dropout {self.dropout} is outside the usual grid {DROPOUT_GRID}", stacklevel=2)
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}")
        if self.mode not in ("transductive", "inductive"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, stream: EventStream) -> ModelConfig:
        return ModelConfig(num_nodes=stream.num_nodes, edge_dim=stream.edge_feat_dim, emb_dim=self.emb_dim,
                           mem_dim=self.mem_dim, time_dim=self.time_dim, num_neighbors=self.k_neighbors,
                           dropout=self.dropout, ablation=self.ablation)


def run_id(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class EvalReport:
    ap: float = float("nan")
    auc: float = float("nan")
    acc: float = float("nan")
    n_scored: int = 0
    curves: dict = field(default_factory=dict)
    seconds: float = 0.0
    config: dict = field(default_factory=dict)
    run_id: str = ""
    extra: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        return {"ap": self.ap, "auc": self.auc, "acc": self.acc}

    def to_dict(self, include_timing: bool = False) -> dict:
        out = asdict(self)
        if not include_timing:
            out.pop("seconds")
        return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_loss(scores: Tensor, labels, from_logits: bool = True) -> Tensor:
    """Mean binary cross entropy over all (positive and negative) samples."""
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.shape} scores vs {labels.shape} labels")
    if from_logits:
        return T.bce_with_logits(scores, labels)
    return T.bce_with_probs(scores, labels)


# ---------------------------------------------------------------------------
# scorers
# ---------------------------------------------------------------------------

class LinkScorer(Protocol):
    cursor: int

    def score(self, stream: EventStream, index: np.ndarray, neg_dst: np.ndarray): ...

    def observe(self, stream: EventStream, index: np.ndarray) -> None: ...


class MPFAScorer:
    """Eval-mode MPFA behind the scorer interface; ``observe`` ingests the last scored batch."""

    name = "mpfa"

    def __init__(self, model: MPFA, state: TemporalState, keep_attention: bool = False):
        self.model = model
        self.state = state
        self.keep_attention = keep_attention
        self.attention: list = []
        self._last: ScoreResult | None = None
        self._last_index: np.ndarray | None = None

    @property
    def cursor(self) -> int:
        return self.state.cursor

    @cursor.setter
    def cursor(self, value: int) -> None:
        self.state.cursor = value

    def score(self, stream, index, neg_dst):
        res = self.model.score(self.state, stream.src[index], stream.dst[index], stream.t[index], neg_dst)
        self._last, self._last_index = res, index
        if self.keep_attention:
            self.attention.append((index, res.attention))
        return res.pos_prob, res.neg_prob

    def observe(self, stream, index):
        if self._last is None or self._last_index is not index:
            res = self.model.score(self.state, stream.src[index], stream.dst[index], stream.t[index])
        else:
            res = self._last
        self.state.ingest(stream.src[index], stream.dst[index], stream.t[index], stream.edge_feat[index],
                          res.z_src.data, res.z_dst.data)
        self._last = None


def warm_state(model: MPFA, state: TemporalState, stream: EventStream, index, batch_size: int) -> None:
    """Advance ``state`` over events without scoring or gradients; the cursor moves past the last one."""
    index = np.asarray(index, dtype=np.int64)
    for idx in make_batches(index, batch_size):
        res = model.score(state, stream.src[idx], stream.dst[idx], stream.t[idx])
        state.ingest(stream.src[idx], stream.dst[idx], stream.t[idx], stream.edge_feat[idx],
                     res.z_src.data, res.z_dst.data)
    if len(index):
        state.cursor = int(index[-1]) + 1


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_linkpred(scorer: LinkScorer, stream: EventStream, part: range, plan: SplitPlan,
                      mode: str = "transductive", batch_size: int = 200, seed: int = 0) -> EvalReport:
    """Score each batch of ``part`` (positives plus one negative each), then let the scorer observe it.

    Every event is observed; in inductive mode only events touching a masked
    node enter the metrics.
    """
    if scorer.cursor != part.start:
        raise ProtocolError(f"scorer is at event {scorer.cursor}, evaluation range starts at {part.start}")
    keep_all = plan.eval_mask(stream, part, mode)
    if not keep_all.any():
        raise ConfigurationError(f"no events to evaluate in {mode} mode")
    rng = np.random.default_rng(seed)
    universe = stream.dst_universe()
    pos_all, neg_all = [], []
    start = time.perf_counter()
    for idx in make_batches(part, batch_size):
        neg = negative_sample(stream.dst[idx], universe, rng)
        pos_p, neg_p = scorer.score(stream, idx, neg)
        scorer.observe(stream, idx)
        keep = keep_all[idx - part.start]
        pos_all.append(np.asarray(pos_p)[keep])
        neg_all.append(np.asarray(neg_p)[keep])
    scorer.cursor = part.stop
    pos, neg = np.concatenate(pos_all), np.concatenate(neg_all)
    m = link_metrics(pos, neg)
    return EvalReport(m["ap"], m["auc"], m["acc"], n_scored=len(pos), seconds=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: MPFA
    state: TemporalState      # positioned at the start of the test range
    report: EvalReport
    test_state: dict          # snapshot of ``state`` before test evaluation


def train(stream: EventStream, plan: SplitPlan, cfg: TrainConfig, model: MPFA | None = None) -> TrainResult:
    """Train on ``plan.train_events()`` with early stopping on validation AP.

    Each epoch starts from a fresh state. For every batch: sample negatives,
    score everything against the batch-start state, take one Adam step on
    the BCE loss, then ingest the positives. The validation pass continues
    the stream. The best epoch's parameters and post-validation state are
    restored before the test pass.
    """
    t0 = time.perf_counter()
    if model is None:
        model = MPFA(cfg.model_config(stream), seed=derive_seed(cfg.seed, "init"))
    opt = Adam(model.params, lr=cfg.lr)
    curves = {"train_loss": [], "val_ap": [], "val_auc": [], "val_acc": []}
    best_ap, best_epoch, best_params, best_state = -np.inf, -1, None, None
    stale = 0
    train_index = plan.train_events()
    for epoch in range(cfg.epochs):
        state = model.new_state()
        neg_rng = rng_for(cfg.seed, "train-negatives", epoch)
        drop_rng = rng_for(cfg.seed, "dropout", epoch)
        losses = []
        for b, idx in enumerate(make_batches(train_index, cfg.batch_size)):
            src, dst, t = stream.src[idx], stream.dst[idx], stream.t[idx]
            neg = negative_sample(dst, stream.dst_universe(), neg_rng)
            opt.zero_grad()
            try:
                with Tape() as tape:
                    res = model.score(state, src, dst, t, neg, training=True, rng=drop_rng)
                    logits = T.concat([res.pos_logits, res.neg_logits], axis=0)
                    labels = np.r_[np.ones(len(idx)), np.zeros(len(idx))]
                    loss = bce_loss(logits, labels)
                    tape.backward(loss)
                opt.step()
            except NumericError as exc:
                raise NumericError(f"non-finite value in epoch {epoch}, batch {b}: {exc}") from exc
            state.ingest(src, dst, t, stream.edge_feat[idx], res.z_src.data, res.z_dst.data)
            losses.append(loss.item())
        state.cursor = plan.train.stop
        curves["train_loss"].append(float(np.mean(losses)) if losses else float("nan"))
        val = evaluate_linkpred(MPFAScorer(model, state), stream, plan.val, plan, plan.mode,
                                cfg.batch_size, derive_seed(cfg.seed, "val-negatives"))
        curves["val_ap"].append(val.ap)
        curves["val_auc"].append(val.auc)
        curves["val_acc"].append(val.acc)
        log.info("epoch %d loss %.4f val ap %.4f auc %.4f", epoch, curves["train_loss"][-1], val.ap, val.auc)
        if val.ap > best_ap:
            best_ap, best_epoch = val.ap, epoch
            best_params, best_state = model.state_dict(), state.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best_params)
    state = model.new_state()
    state.restore(best_state)
    test_state = state.snapshot()
    trans = None
    if plan.mode == "inductive":
        trans = evaluate_with_model(model, state, stream, plan, cfg, "transductive")
        state.restore(test_state)
    report = evaluate_with_model(model, state, stream, plan, cfg, plan.mode)
    if trans is not None:
        report.extra["transductive"] = trans.metrics()
    report.curves = curves
    report.extra.update({"best_epoch": best_epoch, "best_val_ap": best_ap, "epochs_run": len(curves["val_ap"]),
                         "mode": plan.mode})
    report.config = cfg.to_dict()
    report.run_id = run_id(report.config)
    report.seconds = time.perf_counter() - t0
    return TrainResult(model, state, report, test_state)


def evaluate_with_model(model: MPFA, state: TemporalState, stream: EventStream, plan: SplitPlan,
                        cfg: TrainConfig, mode: str) -> EvalReport:
    return evaluate_linkpred(MPFAScorer(model, state), stream, plan.test, plan, mode, cfg.batch_size,
                             derive_seed(cfg.seed, "test-negatives"))


# ---------------------------------------------------------------------------
# node classification
# ---------------------------------------------------------------------------

def replay_embeddings(model: MPFA, stream: EventStream, batch_size: int = 200) -> np.ndarray:
    """Source embedding at every event, replaying the stream with a frozen model."""
    state = model.new_state()
    out = np.zeros((len(stream), model.cfg.emb_dim))
    for idx in make_batches(range(len(stream)), batch_size):
        res = model.score(state, stream.src[idx], stream.dst[idx], stream.t[idx])
        out[idx] = res.z_src.data
        state.ingest(stream.src[idx], stream.dst[idx], stream.t[idx], stream.edge_feat[idx],
                     res.z_src.data, res.z_dst.data)
    return out


def node_classification(stream: EventStream, plan: SplitPlan, model: MPFA | None = None,
                        features: np.ndarray | None = None, epochs: int = 50, lr: float = 1e-3,
                        hidden: int | None = None, batch_size: int = 200, seed: int = 0) -> EvalReport:
    """Train a two-layer MLP on train-range embeddings to predict the source's state label.

    ``features`` replaces the model embeddings (one row per event) when given.
    """
    if not stream.has_labels:
        raise ConfigurationError("stream carries no state labels")
    if features is None:
        if model is None:
            raise ConfigurationError("node classification needs a model or explicit features")
        features = replay_embeddings(model, stream, batch_size)
    features = np.asarray(features, dtype=np.float64).reshape(len(stream), -1)
    labels = stream.labels
    train_idx = np.array([i for i in plan.train if labels[i] >= 0], dtype=np.int64)
    test_idx = np.array([i for i in plan.test if labels[i] >= 0], dtype=np.int64)
    y_train = labels[train_idx]
    if len(train_idx) == 0 or y_train.min() == y_train.max():
        raise ConfigurationError("training labels contain a single class; the classifier is degenerate")
    y_test = labels[test_idx]
    if len(test_idx) == 0 or y_test.min() == y_test.max():
        raise UndefinedMetricError("test labels contain a single class; AUC is undefined")
    dim = features.shape[1]
    hidden = hidden or max(16, dim // 2)
    rng = rng_for(seed, "node-classifier")
    params = {"W1": T.uniform_init(rng, (dim, hidden)), "b1": T.zeros_param((hidden,)),
              "W2": T.uniform_init(rng, (hidden, 1)), "b2": T.zeros_param((1,))}
    opt = Adam(params, lr=lr)

    def logits(x: np.ndarray) -> Tensor:
        h = T.relu(T.linear(Tensor(x), params["W1"], params["b1"]))
        out = T.linear(h, params["W2"], params["b2"])
        return T.reshape(out, (len(x),))

    shuffle = rng_for(seed, "node-classifier-order")
    losses = []
    for _ in range(epochs):
        order = shuffle.permutation(len(train_idx))
        epoch_loss = []
        for chunk in make_batches(order, batch_size):
            rows = train_idx[chunk]
            opt.zero_grad()
            with Tape() as tape:
                loss = T.bce_with_logits(logits(features[rows]), labels[rows].astype(np.float64))
                tape.backward(loss)
            opt.step()
            epoch_loss.append(loss.item())
        losses.append(float(np.mean(epoch_loss)))
    scores = T._sigmoid_np(logits(features[test_idx]).data)
    auc = metric_auc(scores, y_test)
    return EvalReport(auc=auc, n_scored=len(test_idx), curves={"train_loss": losses})


# ---------------------------------------------------------------------------
# sweeps and ablations
# ---------------------------------------------------------------------------

def sweep(stream: EventStream, plan: SplitPlan, cfg: TrainConfig, param: str, values) -> list[dict]:
    """Train and test once per value of one config field."""
    if param not in {f.name for f in fields(TrainConfig)}:
        raise ConfigurationError(f"unknown sweep parameter {param!r}")
    rows = []
    for value in values:
        result = train(stream, plan, replace(cfg, **{param: value}))
        r = result.report
        rows.append({param: value, "ap": r.ap, "auc": r.auc, "acc": r.acc,
                     "best_val_ap": r.extra["best_val_ap"]})
    return rows


def sweep_neighbors(stream: EventStream, plan: SplitPlan, cfg: TrainConfig,
                    k_list=(1, 2, 3, 5, 10, 20, 30)) -> list[dict]:
    return sweep(stream, plan, cfg, "k_neighbors", k_list)


ABLATION_ORDER = ("full", "wo_rp", "wo_ep", "wo_red", "wo_ed")


def run_ablations(stream: EventStream, plan: SplitPlan, cfg: TrainConfig, variants=ABLATION_ORDER) -> list[dict]:
    """One train/test run per variant with shared seeds; inductive plans also report transductive."""
    rows = []
    for name in variants:
        result = train(stream, plan, replace(cfg, ablation=name))
        r = result.report
        rows.append({"variant": name, "subtask": plan.mode, "ap": r.ap, "auc": r.auc, "acc": r.acc})
        if plan.mode == "inductive":
            tr = r.extra["transductive"]
            rows.append({"variant": name, "subtask": "transductive", **tr})
    return rows
