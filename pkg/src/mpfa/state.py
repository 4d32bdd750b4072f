"""
Per-node temporal state.

Holds the evolving vector ``h`` and last embedding ``z_last`` of every node,
an append-only store of frozen raw interaction records (one per endpoint per
event) and a recency-ordered neighbor index over those records.

Memory updates are deferred: :meth:`TemporalState.ingest` freezes the message
inputs of each event and queues them; the model folds the queue into ``h`` at
the start of its next forward pass, so the update function is trained
through that pass while the stored ``h`` stays detached between batches.
"""

from __future__ import annotations

import base64
import copy
import hashlib
from bisect import bisect_left
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import DimensionError, StateError, TimeOrderError


class TimeEncoding(Protocol):
    dim: int

    def __call__(self, dt) -> np.ndarray: ...


class _Rows:
    """Append-only 2-D float buffer with amortised growth."""

    def __init__(self, width: int, capacity: int = 256):
        self.buf = np.zeros((capacity, width))
        self.size = 0

    def append(self, row: np.ndarray) -> int:
        if self.size == len(self.buf):
            grown = np.zeros((2 * len(self.buf), self.buf.shape[1]))
            grown[: self.size] = self.buf[: self.size]
            self.buf = grown
        self.buf[self.size] = row
        self.size += 1
        return self.size - 1

    @property
    def view(self) -> np.ndarray:
        return self.buf[: self.size]


@dataclass
class NeighborRecord:
    partner: int
    t: float
    edge_feat: np.ndarray
    h_partner: np.ndarray
    raw: np.ndarray


@dataclass
class NeighborTable:
    """Padded neighbor lookup for a batch of (node, time) queries.

    Valid entries fill the leading columns of each row, oldest first; padding
    follows.
    """

    record: np.ndarray     # (N, k) record ids, -1 = padding
    mask: np.ndarray       # (N, k) bool
    partner: np.ndarray    # (N, k)
    time: np.ndarray       # (N, k)
    edge_feat: np.ndarray  # (N, k, d_e)
    raw: np.ndarray        # (N, k, raw_dim)

    @property
    def has_any(self) -> np.ndarray:
        return self.mask.any(axis=1)


class TemporalState:
    def __init__(self, num_nodes: int, mem_dim: int, emb_dim: int, edge_dim: int,
                 time_encoder: TimeEncoding, update_memory: bool = True):
        self.num_nodes = num_nodes
        self.mem_dim = mem_dim
        self.emb_dim = emb_dim
        self.edge_dim = edge_dim
        self.time_encoder = time_encoder
        self.update_memory = update_memory
        self.msg_dim = 2 * emb_dim + edge_dim + time_encoder.dim
        self.raw_dim = self.msg_dim
        self.reset()

    def reset(self) -> None:
        n = self.num_nodes
        self.h = np.zeros((n, self.mem_dim))
        self.z_last = np.zeros((n, self.emb_dim))
        self.t_last = np.zeros(n)
        self.exists = np.zeros(n, dtype=bool)
        self.update_count = np.zeros(n, dtype=np.int64)
        self.cursor = 0
        self._rec_owner: list[int] = []
        self._rec_partner: list[int] = []
        self._rec_time: list[float] = []
        self._rec_feat = _Rows(self.edge_dim)
        self._rec_raw = _Rows(self.raw_dim)
        self._adj: list[list[int]] = [[] for _ in range(n)]
        self._adj_t: list[list[float]] = [[] for _ in range(n)]
        self._pend_node: list[int] = []
        self._pend_msg: list[np.ndarray] = []

    # ------------------------------------------------------------------
    # queries
    # ------------------------------------------------------------------

    @property
    def num_records(self) -> int:
        return len(self._rec_owner)

    def raw_record(self, rec: int) -> np.ndarray:
        return self._rec_raw.view[rec]

    def history_length(self, node: int) -> int:
        return len(self._adj[node])

    def recent_neighbors(self, node: int, t: float, k: int = 10) -> list[NeighborRecord]:
        """Up to ``k`` most recent interactions of ``node`` strictly before ``t``, oldest first."""
        times = self._adj_t[node]
        end = bisect_left(times, t)
        recs = self._adj[node][max(0, end - k):end]
        return [
            NeighborRecord(self._rec_partner[r], self._rec_time[r], self._rec_feat.view[r].copy(),
                           self.h[self._rec_partner[r]].copy(), self._rec_raw.view[r].copy())
            for r in recs
        ]

    def neighbor_table(self, nodes: np.ndarray, times: np.ndarray, k: int) -> NeighborTable:
        n = len(nodes)
        rec = np.full((n, k), -1, dtype=np.int64)
        for row, (node, t) in enumerate(zip(nodes.tolist(), times.tolist())):
            times_i = self._adj_t[node]
            end = bisect_left(times_i, t)
            if end:
                ids = self._adj[node][max(0, end - k):end]
                rec[row, : len(ids)] = ids
        mask = rec >= 0
        safe = np.where(mask, rec, 0)
        if self.num_records == 0:
            partner = np.zeros((n, k), dtype=np.int64)
            time = np.zeros((n, k))
            feat = np.zeros((n, k, self.edge_dim))
            raw = np.zeros((n, k, self.raw_dim))
        else:
            partner = np.asarray(self._rec_partner, dtype=np.int64)[safe]
            time = np.asarray(self._rec_time)[safe]
            feat = self._rec_feat.view[safe]
            raw = self._rec_raw.view[safe]
        return NeighborTable(rec, mask, partner, np.where(mask, time, 0.0), feat, raw)

    # ------------------------------------------------------------------
    # mutation
    # ------------------------------------------------------------------

    def message_input(self, i: int, j: int, t: float, edge_feat: np.ndarray) -> np.ndarray:
        """Frozen input of node ``i``'s event message: ``[z_i || e || z_j || phi(t - t_last_i)]``."""
        edge_feat = np.asarray(edge_feat, dtype=np.float64).reshape(-1)
        if edge_feat.shape[0] != self.edge_dim:
            raise DimensionError(f"edge feature has {edge_feat.shape[0]} values, expected {self.edge_dim}")
        dt = t - self.t_last[i]
        if dt < 0:
            raise TimeOrderError(f"event at t={t} precedes last interaction of node {i} at {self.t_last[i]}")
        return np.concatenate([self.z_last[i], edge_feat, self.z_last[j], self.time_encoder(dt)])

    def record_raw(self, i: int, j: int, t: float, edge_feat: np.ndarray) -> None:
        """Append the frozen raw records of event (i, j, t) to both endpoints' stores."""
        edge_feat = np.asarray(edge_feat, dtype=np.float64).reshape(-1)
        if edge_feat.shape[0] != self.edge_dim:
            raise DimensionError(f"edge feature has {edge_feat.shape[0]} values, expected {self.edge_dim}")
        pairs = ((i, j),) if i == j else ((i, j), (j, i))
        for owner, partner in pairs:
            dt = t - self.t_last[owner]
            if dt < 0:
                raise TimeOrderError(f"event at t={t} precedes last interaction of node {owner}")
            # partner-first ordering
            vec = np.concatenate([self.z_last[partner], edge_feat, self.z_last[owner], self.time_encoder(dt)])
            rec = len(self._rec_owner)
            self._rec_owner.append(owner)
            self._rec_partner.append(partner)
            self._rec_time.append(float(t))
            self._rec_feat.append(edge_feat)
            self._rec_raw.append(vec)
            self._adj[owner].append(rec)
            self._adj_t[owner].append(float(t))

    def set_last_embedding(self, i: int, z: np.ndarray, t: float) -> None:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.emb_dim,):
            raise DimensionError(f"embedding shape {z.shape} != ({self.emb_dim},)")
        self.z_last[i] = z

    def ingest(self, src, dst, t, edge_feat, z_src, z_dst) -> None:
        """Apply the post-prediction protocol for a batch of positive events, in event order.

        For each event: freeze both message inputs (queued for the memory
        update), record the raw interaction for both endpoints, advance
        ``t_last`` and store the embeddings produced for this event.
        """
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        edge_feat = np.asarray(edge_feat, dtype=np.float64).reshape(len(src), -1)
        for n in range(len(src)):
            i, j, tn = int(src[n]), int(dst[n]), float(t[n])
            if tn < self.t_last[i] or tn < self.t_last[j]:
                raise TimeOrderError(f"event {n} at t={tn} is older than the endpoints' last interaction")
            mi = self.message_input(i, j, tn, edge_feat[n])
            mj = self.message_input(j, i, tn, edge_feat[n])
            self.record_raw(i, j, tn, edge_feat[n])
            if self.update_memory:
                self._pend_node.append(i)
                self._pend_msg.append(mi)
                if j != i:
                    self._pend_node.append(j)
                    self._pend_msg.append(mj)
            self.t_last[i] = self.t_last[j] = tn
            self.exists[i] = self.exists[j] = True
            self.set_last_embedding(i, z_src[n], tn)
            self.set_last_embedding(j, z_dst[n], tn)

    def pending(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._pend_node:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.msg_dim))
        return np.asarray(self._pend_node, dtype=np.int64), np.stack(self._pend_msg)

    def commit_memory(self, nodes: np.ndarray, h_rows: np.ndarray, counts: np.ndarray) -> None:
        """Store updated memory rows and clear the pending queue."""
        self.h[nodes] = h_rows
        np.add.at(self.update_count, nodes, counts)
        self._pend_node.clear()
        self._pend_msg.clear()

    def set_memory(self, i: int, h: np.ndarray, t: float) -> None:
        if t < self.t_last[i]:
            raise TimeOrderError(f"update at t={t} precedes last interaction of node {i} at {self.t_last[i]}")
        self.h[i] = h
        self.t_last[i] = t
        self.update_count[i] += 1

    # ------------------------------------------------------------------
    # snapshots and serialization
    # ------------------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "h": self.h.copy(), "z_last": self.z_last.copy(), "t_last": self.t_last.copy(),
            "exists": self.exists.copy(), "update_count": self.update_count.copy(), "cursor": self.cursor,
            "rec_owner": list(self._rec_owner), "rec_partner": list(self._rec_partner),
            "rec_time": list(self._rec_time),
            "rec_feat": self._rec_feat.view.copy(), "rec_raw": self._rec_raw.view.copy(),
            "pend_node": list(self._pend_node), "pend_msg": [m.copy() for m in self._pend_msg],
        }

    def restore(self, snap: dict) -> None:
        if snap.get("num_nodes") != self.num_nodes:
            raise StateError(f"snapshot has {snap.get('num_nodes')} nodes, state has {self.num_nodes}")
        if snap["h"].shape[1] != self.mem_dim or snap["rec_raw"].shape[1] != self.raw_dim:
            raise StateError("snapshot dimensions do not match this state")
        self.h = snap["h"].copy()
        self.z_last = snap["z_last"].copy()
        self.t_last = snap["t_last"].copy()
        self.exists = snap["exists"].copy()
        self.update_count = snap["update_count"].copy()
        self.cursor = int(snap["cursor"])
        self._rec_owner = list(snap["rec_owner"])
        self._rec_partner = list(snap["rec_partner"])
        self._rec_time = list(snap["rec_time"])
        self._rec_feat = _Rows(self.edge_dim, max(256, len(self._rec_owner)))
        self._rec_raw = _Rows(self.raw_dim, max(256, len(self._rec_owner)))
        n_rec = len(self._rec_owner)
        self._rec_feat.buf[:n_rec] = snap["rec_feat"]
        self._rec_feat.size = n_rec
        self._rec_raw.buf[:n_rec] = snap["rec_raw"]
        self._rec_raw.size = n_rec
        self._adj = [[] for _ in range(self.num_nodes)]
        self._adj_t = [[] for _ in range(self.num_nodes)]
        for rec, (owner, t) in enumerate(zip(self._rec_owner, self._rec_time)):
            self._adj[owner].append(rec)
            self._adj_t[owner].append(t)
        self._pend_node = list(snap["pend_node"])
        self._pend_msg = [m.copy() for m in snap["pend_msg"]]

    def copy(self) -> "TemporalState":
        other = copy.copy(self)
        other.restore(self.snapshot())
        return other

    def fingerprint(self) -> str:
        """SHA-256 over every array of the state (bit-level equality check)."""
        digest = hashlib.sha256()
        snap = self.snapshot()
        for key in sorted(snap):
            digest.update(key.encode())
            value = snap[key]
            if isinstance(value, list) and value and isinstance(value[0], np.ndarray):
                value = np.stack(value)
            digest.update(np.ascontiguousarray(np.asarray(value, dtype=np.float64)).tobytes())
        return digest.hexdigest()

    def raw_store_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self._rec_raw.view).tobytes()).hexdigest()

    def to_json_dict(self) -> dict:
        snap = self.snapshot()
        out = {}
        for key, value in snap.items():
            if isinstance(value, np.ndarray):
                out[key] = encode_array(value)
            elif key == "pend_msg":
                out[key] = encode_array(np.stack(value) if value else np.zeros((0, self.msg_dim)))
            else:
                out[key] = value
        return out

    def load_json_dict(self, data: dict) -> None:
        snap = {}
        for key, value in data.items():
            if isinstance(value, dict) and "b64" in value:
                snap[key] = decode_array(value)
            else:
                snap[key] = value
        snap["exists"] = snap["exists"].astype(bool)
        snap["update_count"] = snap["update_count"].astype(np.int64)
        snap["pend_msg"] = list(snap["pend_msg"])
        self.restore(snap)


def encode_array(a: np.ndarray) -> dict:
    """Row-major little-endian float64 bytes, base64-encoded, with the shape."""
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "b64": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["b64"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()
