"""
The MPFA forward pass.

A node's embedding at time ``t`` couples three views of its neighborhood:

* its own evolving memory and the time since its last interaction,
* the *evolving* perspective: two-head temporal attention over the current
  memories of its ``k`` most recent neighbors,
* the *raw* perspective: the frozen records of those same interactions,
  weighted by positive feedback coefficients computed from both endpoints'
  current memories and the elapsed time.

A two-layer network fuses the three projections; an MLP scores node pairs.
All computation is batched over rows of (node, time) queries.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, TimeOrderError
from .state import TemporalState
from .tensor import GRUParams, Tensor


@dataclass(frozen=True)
class Ablation:
    name: str = "full"
    use_raw: bool = True
    use_evolving: bool = True
    update_memory: bool = True


ABLATIONS: dict[str, Ablation] = {
    "full": Ablation("full"),
    "wo_rp": Ablation("wo_rp", use_raw=False),
    "wo_ep": Ablation("wo_ep", use_evolving=False),
    "wo_red": Ablation("wo_red", update_memory=False),
    "wo_ed": Ablation("wo_ed", use_raw=False, update_memory=False),
}


def get_ablation(name: str) -> Ablation:
    try:
        return ABLATIONS[name]
    except KeyError:
        raise ConfigurationError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None


# parameter-name prefixes owned by each perspective
RAW_PREFIXES = ("feedback.", "raw.", "trans.", "couple.raw.")
EVOLVING_PREFIXES = ("attn.", "couple.evol.")


@dataclass
class ModelConfig:
    num_nodes: int
    edge_dim: int
    emb_dim: int = 172
    mem_dim: int | None = None
    time_dim: int = 100
    num_neighbors: int = 10
    dropout: float = 0.0
    ablation: str = "full"

    def __post_init__(self):
        if self.mem_dim is None:
            self.mem_dim = self.emb_dim
        for name in ("num_nodes", "emb_dim", "mem_dim", "time_dim", "num_neighbors"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.edge_dim < 0:
            raise ConfigurationError("edge_dim must be non-negative")
        get_ablation(self.ablation)

    @property
    def head_dim(self) -> int:
        return max(1, self.emb_dim // 2)

    def to_dict(self) -> dict:
        return asdict(self)


class TimeEncoder:
    """Fixed cosine encoding ``phi(dt)_k = cos(dt / 10000**(2k/dim))``."""

    def __init__(self, dim: int):
        self.dim = dim
        self.freqs = 1.0 / 10000.0 ** (2.0 * np.arange(dim) / dim)

    def __call__(self, dt) -> np.ndarray:
        dt = np.asarray(dt, dtype=np.float64)
        if np.any(dt < 0):
            raise TimeOrderError(f"negative time difference {dt.min()}")
        return np.cos(dt[..., None] * self.freqs)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dh, dt, de, hd = cfg.emb_dim, cfg.mem_dim, cfg.time_dim, cfg.edge_dim, cfg.head_dim
    msg = 2 * d + de + dt
    dq, dk = dh + dt, dh + de + dt
    shapes: dict[str, tuple[int, ...]] = {
        "memory.W_evol": (msg, dh), "memory.b_evol": (dh,),
    }
    for gate in ("z", "r", "h"):
        shapes[f"gru.W_{gate}"] = (dh, dh)
        shapes[f"gru.U_{gate}"] = (dh, dh)
        shapes[f"gru.b_{gate}"] = (dh,)
    for head in (0, 1):
        shapes[f"attn.q{head}.W"] = (dq, hd)
        shapes[f"attn.q{head}.b"] = (hd,)
        shapes[f"attn.k{head}.W"] = (dk, hd)
        shapes[f"attn.k{head}.b"] = (hd,)
        shapes[f"attn.v{head}.W"] = (dk, hd)
        shapes[f"attn.v{head}.b"] = (hd,)
    shapes.update({
        "attn.con.W": (2 * hd, d), "attn.con.b": (d,),
        "feedback.r0.W": (2 * dh + dt, d), "feedback.r0.b": (d,),
        "feedback.r1.W": (d, 1), "feedback.r1.b": (1,),
        "raw.W": (msg, d), "raw.b": (d,),
        "trans.W1": (d + dt, d), "trans.b1": (d,),
        "trans.W2": (d, d), "trans.b2": (d,),
        "couple.node.W": (dh + dt, d), "couple.node.b": (d,),
        "couple.evol.W": (dh + d, d), "couple.evol.b": (d,),
        "couple.raw.W": (dh + d, d), "couple.raw.b": (d,),
        "fnn.W1": (3 * d, d), "fnn.b1": (d,),
        "fnn.W2": (d, d), "fnn.b2": (d,),
        "decoder.W1": (2 * d, d), "decoder.b1": (d,),
        "decoder.W2": (d, d), "decoder.b2": (d,),
        "decoder.W3": (d, 1), "decoder.b3": (1,),
    })
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = T.zeros_param(shape, name)
        else:
            params[name] = T.uniform_init(rng, shape, name)
    return params


# ---------------------------------------------------------------------------
# building blocks (batched over query rows)
# ---------------------------------------------------------------------------

def _lin(p: dict[str, Tensor], x: Tensor, prefix: str, suffix: str = "") -> Tensor:
    return T.linear(x, p[f"{prefix}.W{suffix}"], p[f"{prefix}.b{suffix}"])


def evolving_attention(p, h_self: Tensor, h_nbr: Tensor, edge_feat: np.ndarray, phi_nbr: np.ndarray,
                       mask: np.ndarray, phi_zero: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Two-head scaled dot-product attention over neighbors' current memories.

    Returns ``P_e`` (rows with no neighbors are zero) and the weights, shape (2, N, k).
    """
    n, k = mask.shape
    query = T.concat([h_self, Tensor(np.broadcast_to(phi_zero, (n, len(phi_zero))))])
    keys = T.concat([h_nbr, Tensor(edge_feat), Tensor(phi_nbr)])
    heads, weights = [], []
    for head in (0, 1):
        q = _lin(p, query, f"attn.q{head}")
        kk = _lin(p, keys, f"attn.k{head}")
        v = _lin(p, keys, f"attn.v{head}")
        scale = 1.0 / np.sqrt(q.shape[-1])
        scores = T.reduce_sum(kk * T.reshape(q, (n, 1, q.shape[-1])), axis=-1) * scale
        w = T.softmax(scores, axis=-1, mask=mask)
        heads.append(T.reduce_sum(v * T.reshape(w, (n, k, 1)), axis=1))
        weights.append(w.data)
    out = _lin(p, T.concat(heads), "attn.con")
    has = mask.any(axis=1, keepdims=True).astype(np.float64)
    return out * has, np.stack(weights)


def growth_feature(p, h_self: Tensor, h_nbr: Tensor, phi_nbr: np.ndarray) -> Tensor:
    """``relu(W_r0 [h_i || h_j || phi(t - t_j)])`` for every (query, neighbor) pair."""
    n, k, dh = h_nbr.shape
    h_i = T.broadcast_to(T.reshape(h_self, (n, 1, dh)), (n, k, dh))
    return T.relu(_lin(p, T.concat([h_i, h_nbr, Tensor(phi_nbr)]), "feedback.r0"))


def feedback_coefficients(p, growth: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over neighbors of ``sigmoid(W_r1 g)``; padded entries get 0."""
    n, k = mask.shape
    intensity = T.sigmoid(_lin(p, growth, "feedback.r1"))
    return T.softmax(T.reshape(intensity, (n, k)), axis=-1, mask=mask)


def raw_aggregation(p, raw: np.ndarray, phi_nbr: np.ndarray, coeff: Tensor, mask: np.ndarray) -> Tensor:
    """Coefficient-weighted sum of the two-layer transform of ``[W_raw x_j || phi(t - t_j)]``."""
    n, k = mask.shape
    if coeff.shape != (n, k):
        raise DimensionError(f"coefficients {coeff.shape} do not match neighbors {(n, k)}")
    r = _lin(p, Tensor(raw), "raw")
    c = T.concat([r, Tensor(phi_nbr)])
    transformed = T.linear(T.relu(T.linear(c, p["trans.W1"], p["trans.b1"])), p["trans.W2"], p["trans.b2"])
    out = T.reduce_sum(transformed * T.reshape(coeff, (n, k, 1)), axis=1)
    has = mask.any(axis=1, keepdims=True).astype(np.float64)
    return out * has


def couple(p, h_self: Tensor, phi_self: np.ndarray, p_evol: Tensor | None, p_raw: Tensor | None,
           dropout: float = 0.0, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Fuse self, evolving and raw projections through a two-layer network.

    A missing perspective contributes an all-zero block.
    """
    n = h_self.shape[0]
    d = p["fnn.W2"].shape[1]
    z1 = _lin(p, T.concat([h_self, Tensor(phi_self)]), "couple.node")
    z2 = _lin(p, T.concat([h_self, p_evol]), "couple.evol") if p_evol is not None else Tensor(np.zeros((n, d)))
    z3 = _lin(p, T.concat([h_self, p_raw]), "couple.raw") if p_raw is not None else Tensor(np.zeros((n, d)))
    hidden = T.relu(T.linear(T.concat([z1, z2, z3]), p["fnn.W1"], p["fnn.b1"]))
    hidden = T.dropout(hidden, dropout, training, rng)
    return T.linear(hidden, p["fnn.W2"], p["fnn.b2"])


def decode_logits(p, z_i: Tensor, z_j: Tensor, dropout: float = 0.0, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    x = T.concat([z_i, z_j])
    x = T.dropout(T.relu(T.linear(x, p["decoder.W1"], p["decoder.b1"])), dropout, training, rng)
    x = T.dropout(T.relu(T.linear(x, p["decoder.W2"], p["decoder.b2"])), dropout, training, rng)
    out = T.linear(x, p["decoder.W3"], p["decoder.b3"])
    return T.reshape(out, (out.shape[0],))


def decode_link(p, z_i: Tensor, z_j: Tensor) -> np.ndarray:
    """Link probability for each row pair (eval mode)."""
    return T.sigmoid(decode_logits(p, z_i, z_j)).data


# ---------------------------------------------------------------------------
# memory materialization
# ---------------------------------------------------------------------------

class MemoryView:
    """Current memory rows; rows touched by the pending queue stay differentiable."""

    def __init__(self, state: TemporalState, touched: np.ndarray | None = None, rows: Tensor | None = None):
        self.state = state
        self.rows_tensor = rows
        self.slot = np.full(state.num_nodes, -1, dtype=np.int64)
        if touched is not None:
            self.slot[touched] = np.arange(len(touched))

    def rows(self, nodes: np.ndarray) -> Tensor:
        nodes = np.asarray(nodes, dtype=np.int64)
        base = Tensor(self.state.h[nodes])
        if self.rows_tensor is None:
            return base
        where = np.nonzero(self.slot[nodes] >= 0)[0]
        if len(where) == 0:
            return base
        return T.put_rows(base, where, T.take_rows(self.rows_tensor, self.slot[nodes[where]]))


def materialize_memory(p, state: TemporalState) -> MemoryView:
    """Fold the pending update queue into memory, in event order per node.

    Updates are grouped into rounds by per-node occurrence index; rounds touch
    disjoint nodes, so each round is one batched GRU step. The result is
    committed (detached) to ``state``; the returned view keeps the graph.
    """
    nodes, msgs = state.pending()
    if len(nodes) == 0:
        return MemoryView(state)
    gru = gru_params(p)
    uniq, inverse = np.unique(nodes, return_inverse=True)
    occurrence = np.zeros(len(nodes), dtype=np.int64)
    seen = np.zeros(len(uniq), dtype=np.int64)
    for n, u in enumerate(inverse):
        occurrence[n] = seen[u]
        seen[u] += 1
    messages = T.linear(Tensor(msgs), p["memory.W_evol"], p["memory.b_evol"])
    current = Tensor(state.h[uniq])
    for r in range(int(occurrence.max()) + 1):
        sel = np.nonzero(occurrence == r)[0]
        slots = inverse[sel]
        updated = T.gru_cell(T.take_rows(messages, sel), T.take_rows(current, slots), gru)
        current = T.put_rows(current, slots, updated)
    state.commit_memory(uniq, current.data, seen)
    return MemoryView(state, uniq, current)


def gru_params(p) -> GRUParams:
    return GRUParams(*(p[f"gru.{m}_{g}"] for g in ("z", "r", "h") for m in ("W", "U", "b")))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class AttentionDump:
    nodes: np.ndarray          # (N,)
    times: np.ndarray          # (N,)
    mask: np.ndarray           # (N, k)
    dt: np.ndarray             # (N, k)
    partner: np.ndarray        # (N, k)
    evolving: np.ndarray | None  # (2, N, k) per-head weights
    raw: np.ndarray | None       # (N, k)


@dataclass
class ScoreResult:
    pos_logits: Tensor
    neg_logits: Tensor | None
    z_src: Tensor
    z_dst: Tensor
    attention: AttentionDump = field(repr=False)

    @property
    def pos_prob(self) -> np.ndarray:
        return T._sigmoid_np(self.pos_logits.data)

    @property
    def neg_prob(self) -> np.ndarray | None:
        return None if self.neg_logits is None else T._sigmoid_np(self.neg_logits.data)


class MPFA:
    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.ablation = get_ablation(cfg.ablation)
        self.time_encoder = TimeEncoder(cfg.time_dim)
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))
        expected = param_shapes(cfg)
        if set(self.params) != set(expected) or any(self.params[k].shape != s for k, s in expected.items()):
            raise DimensionError("parameter set does not match the model configuration")

    def new_state(self) -> TemporalState:
        return TemporalState(self.cfg.num_nodes, self.cfg.mem_dim, self.cfg.emb_dim, self.cfg.edge_dim,
                             self.time_encoder, update_memory=self.ablation.update_memory)

    # -- parameters -----------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self.params[k].shape != v.shape:
                raise DimensionError(f"shape mismatch for {k}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def param_digest(self) -> str:
        digest = hashlib.sha256()
        for k in sorted(self.params):
            digest.update(k.encode())
            digest.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return digest.hexdigest()

    def num_parameters(self) -> int:
        return int(sum(v.data.size for v in self.params.values()))

    # -- single-event operations ------------------------------------------

    def event_message(self, state: TemporalState, i: int, j: int, t: float, edge_feat) -> Tensor:
        x = Tensor(state.message_input(i, j, t, edge_feat))
        return T.linear(x, self.params["memory.W_evol"], self.params["memory.b_evol"])

    def apply_update(self, state: TemporalState, i: int, message: Tensor, t: float) -> np.ndarray:
        """Eager memory update of one node: ``h <- GRU(message, h)``."""
        h = T.gru_cell(message, Tensor(state.h[i]), gru_params(self.params))
        state.set_memory(i, h.data, t)
        return h.data

    def flush(self, state: TemporalState) -> None:
        """Fold pending updates into memory without recording gradients."""
        materialize_memory(self.params, state)

    # -- batched forward ----------------------------------------------------

    def embed(self, state: TemporalState, nodes, times, memory: MemoryView | None = None,
              training: bool = False, rng: np.random.Generator | None = None) -> tuple[Tensor, AttentionDump]:
        """Embeddings of ``nodes`` at ``times`` against the current state."""
        cfg, p, te = self.cfg, self.params, self.time_encoder
        nodes = np.asarray(nodes, dtype=np.int64)
        times = np.asarray(times, dtype=np.float64)
        if memory is None:
            memory = materialize_memory(p, state)
        n, k = len(nodes), cfg.num_neighbors
        h_self = memory.rows(nodes)
        phi_self = te(times - state.t_last[nodes])
        table = state.neighbor_table(nodes, times, k)
        dt_nbr = np.where(table.mask, times[:, None] - table.time, 0.0)
        phi_nbr = te(dt_nbr)
        h_nbr = None
        if self.ablation.use_evolving or self.ablation.use_raw:
            h_nbr = T.reshape(memory.rows(table.partner.reshape(-1)), (n, k, cfg.mem_dim))
        p_evol = p_raw = None
        w_evol = w_raw = None
        if self.ablation.use_evolving:
            p_evol, w_evol = evolving_attention(p, h_self, h_nbr, table.edge_feat, phi_nbr, table.mask, te(0.0))
        if self.ablation.use_raw:
            coeff = feedback_coefficients(p, growth_feature(p, h_self, h_nbr, phi_nbr), table.mask)
            p_raw = raw_aggregation(p, table.raw, phi_nbr, coeff, table.mask)
            w_raw = coeff.data
        z = couple(p, h_self, phi_self, p_evol, p_raw, cfg.dropout, training, rng)
        dump = AttentionDump(nodes, times, table.mask, dt_nbr, table.partner, w_evol, w_raw)
        return z, dump

    def score(self, state: TemporalState, src, dst, t, neg_dst=None, training: bool = False,
              rng: np.random.Generator | None = None) -> ScoreResult:
        """Score positives (src, dst, t) and optional negatives (src, neg_dst, t)."""
        src = np.asarray(src, dtype=np.int64)
        b = len(src)
        parts = [src, np.asarray(dst, dtype=np.int64)]
        if neg_dst is not None:
            parts.append(np.asarray(neg_dst, dtype=np.int64))
        nodes = np.concatenate(parts)
        times = np.tile(np.asarray(t, dtype=np.float64), len(parts))
        memory = materialize_memory(self.params, state)
        z, dump = self.embed(state, nodes, times, memory, training, rng)
        z_src, z_dst = z[0:b], z[b:2 * b]
        d = self.cfg.dropout
        pos = decode_logits(self.params, z_src, z_dst, d, training, rng)
        neg = None
        if neg_dst is not None:
            neg = decode_logits(self.params, z_src, z[2 * b:3 * b], d, training, rng)
        return ScoreResult(pos, neg, z_src, z_dst, dump)

    def forward_event(self, state: TemporalState, i: int, j: int, t: float):
        """Link probability and both embeddings for one event, plus attention dumps."""
        res = self.score(state, [i], [j], [t])
        return float(res.pos_prob[0]), res.z_src.data[0], res.z_dst.data[0], res.attention
