import numpy as np
import pytest

from mpfa.events import EventStream
from mpfa.model import MPFA, ModelConfig


def small_model(num_nodes=6, edge_dim=2, emb_dim=4, time_dim=3, k=3, ablation="full", seed=0, **kw):
    cfg = ModelConfig(num_nodes=num_nodes, edge_dim=edge_dim, emb_dim=emb_dim, time_dim=time_dim,
                      num_neighbors=k, ablation=ablation, **kw)
    return MPFA(cfg, seed=seed)


def toy_stream(events, num_nodes=6, edge_dim=2, seed=0):
    """EventStream from (src, dst, t) triples with random edge features."""
    rng = np.random.default_rng(seed)
    src = np.array([e[0] for e in events], dtype=np.int64)
    dst = np.array([e[1] for e in events], dtype=np.int64)
    t = np.array([e[2] for e in events], dtype=np.float64)
    return EventStream(src, dst, t, rng.normal(size=(len(events), edge_dim)), num_nodes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY_EVENTS = [(0, 1, 1.0), (1, 2, 2.0), (0, 2, 3.0), (2, 3, 4.0), (0, 1, 5.0)]


def toy_gradient_problem(seed=0, scale=0.5):
    """Loss on the last two toy events after ingesting the first three.

    Parameters are drawn at a generic point (normal, nonzero biases): at the
    default initialization the loss is nearly flat and finite differences
    drown in round-off. Returns ``(model, loss_fn)``; ``loss_fn`` restores the
    state first, so it can be called repeatedly, and the pending update queue
    of six memory updates is folded in inside every call.
    """
    from mpfa import tensor as T

    model = small_model(emb_dim=4, time_dim=3, k=3)
    rng = np.random.default_rng(seed)
    for t in model.params.values():
        t.data = rng.normal(scale=scale, size=t.shape)
    stream = toy_stream(TOY_EVENTS)
    state = model.new_state()
    res = model.score(state, stream.src[:3], stream.dst[:3], stream.t[:3])
    state.ingest(stream.src[:3], stream.dst[:3], stream.t[:3], stream.edge_feat[:3], res.z_src.data, res.z_dst.data)
    assert len(state.pending()[0]) == 6
    snap = state.snapshot()
    neg = np.array([4, 5])
    labels = np.r_[np.ones(2), np.zeros(2)]

    def loss(*_):
        state.restore(snap)
        r = model.score(state, stream.src[3:], stream.dst[3:], stream.t[3:], neg)
        return T.bce_with_logits(T.concat([r.pos_logits, r.neg_logits], axis=0), labels)

    return model, loss


# one line per acceptance criterion, printed after the run whatever the capture mode
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
