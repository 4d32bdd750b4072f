"""Event streams: loading, chronological splits, batching and negative sampling."""

from __future__ import annotations

import csv
import gzip
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, ParameterError, ParseError, SamplingError, StateError


@dataclass(frozen=True)
class Event:
    src: int
    dst: int
    t: float
    edge_feat: np.ndarray
    state_label: int | None = None


@dataclass(eq=False)
class EventStream:
    """A time-sorted interaction stream held as parallel arrays.

    ``labels`` uses -1 for "no label". For bipartite data, destination
    (item) ids occupy ``[num_users, num_nodes)``.
    """

    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray
    edge_feat: np.ndarray
    num_nodes: int
    labels: np.ndarray | None = None
    bipartite: bool = False
    num_users: int = 0

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.t = np.asarray(self.t, dtype=np.float64)
        n = len(self.src)
        feat = np.asarray(self.edge_feat, dtype=np.float64)
        width = feat.shape[-1] if feat.ndim == 2 else (feat.size // n if n else 0)
        self.edge_feat = feat.reshape(n, width)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.dst) == len(self.t) == n):
            raise ParseError("src/dst/t arrays differ in length")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise StateError("event timestamps must be non-decreasing")
            if not np.isfinite(self.t).all() or self.t.min() < 0:
                raise StateError("timestamps must be finite and non-negative")
            if max(self.src.max(), self.dst.max()) >= self.num_nodes or min(self.src.min(), self.dst.min()) < 0:
                raise StateError("node id outside [0, num_nodes)")

    def __len__(self) -> int:
        return len(self.src)

    @property
    def edge_feat_dim(self) -> int:
        return self.edge_feat.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None and bool(np.any(self.labels >= 0))

    def event(self, i: int) -> Event:
        label = None if self.labels is None or self.labels[i] < 0 else int(self.labels[i])
        return Event(int(self.src[i]), int(self.dst[i]), float(self.t[i]), self.edge_feat[i].copy(), label)

    def events(self) -> list[Event]:
        return [self.event(i) for i in range(len(self))]

    def dst_universe(self) -> np.ndarray:
        """Candidate negative destinations: items for bipartite data, else all nodes."""
        if self.bipartite:
            return np.arange(self.num_users, self.num_nodes)
        return np.arange(self.num_nodes)

    def subset(self, index: np.ndarray) -> "EventStream":
        index = np.asarray(index, dtype=np.int64)
        return EventStream(
            self.src[index], self.dst[index], self.t[index], self.edge_feat[index], self.num_nodes,
            None if self.labels is None else self.labels[index], self.bipartite, self.num_users,
        )


# ---------------------------------------------------------------------------
# CSV input/output
# ---------------------------------------------------------------------------

def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, "r", encoding="utf-8", newline="")


def _parse_float(text: str, line: int, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric {what} {text!r}", line) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite {what} {text!r}", line)
    return value


def _parse_int(text: str, line: int, what: str) -> int:
    value = _parse_float(text, line, what)
    if value != int(value) or value < 0:
        raise ParseError(f"{what} must be a non-negative integer, got {text!r}", line)
    return int(value)


def load_csv(path: str | Path, header: bool = True, bipartite: bool | None = None) -> EventStream:
    """Load an interaction CSV.

    Columns are ``src,dst,t[,label[,feats...]]`` either way. With a header,
    ``bipartite`` defaults to whether the first column is named ``user``
    (the JODIE layout ``user,item,timestamp,state_label,features...``);
    bipartite items are re-indexed after the users. Headerless files default
    to a shared id space. Lines starting with ``#`` are ignored.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    rows: list[tuple[int, int, float, int, list[float]]] = []
    feat_dim: int | None = None
    with _open_text(path) as fh:
        seen_header = False
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                continue
            row = next(csv.reader([line]), [])
            if header and not seen_header:
                seen_header = True
                if bipartite is None:
                    bipartite = bool(row) and row[0].strip().lower() in ("user", "user_id", "u")
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise ParseError(f"expected at least 3 fields, got {len(row)}", lineno)
            src = _parse_int(row[0], lineno, "source id")
            dst = _parse_int(row[1], lineno, "destination id")
            t = _parse_float(row[2], lineno, "timestamp")
            if t < 0:
                raise ParseError(f"negative timestamp {row[2]!r}", lineno)
            label = -1
            if len(row) > 3 and row[3].strip() != "":
                label = _parse_int(row[3], lineno, "state label")
            feats = [_parse_float(c, lineno, "feature") for c in row[4:]]
            if feat_dim is None:
                feat_dim = len(feats)
            elif len(feats) != feat_dim:
                raise ParseError(f"feature row has {len(feats)} values, expected {feat_dim}", lineno)
            rows.append((src, dst, t, label, feats))
    if not rows:
        raise ParseError("no events in file")
    bipartite = bool(bipartite)
    src = np.array([r[0] for r in rows], dtype=np.int64)
    dst = np.array([r[1] for r in rows], dtype=np.int64)
    t = np.array([r[2] for r in rows])
    labels = np.array([r[3] for r in rows], dtype=np.int64)
    feats = np.array([r[4] for r in rows], dtype=np.float64).reshape(len(rows), feat_dim or 0)
    order = np.argsort(t, kind="stable")
    num_users = 0
    if bipartite:
        num_users = int(src.max()) + 1
        dst = dst + num_users
    num_nodes = int(max(src.max(), dst.max())) + 1
    return EventStream(
        src[order], dst[order], t[order], feats[order], num_nodes,
        labels[order] if np.any(labels >= 0) else None, bipartite, num_users,
    )


def write_csv(stream: EventStream, path: str | Path, header: bool = True, comment: str | None = None) -> None:
    """Write ``stream`` so that :func:`load_csv` with the same flags reproduces it.

    Bipartite item ids are written back in their un-offset form. ``comment``
    goes on a leading ``#`` line, which the loader skips.
    """
    path = Path(path)
    fh = io.StringIO()
    if comment is not None:
        fh.write("# " + comment + "\n")
    w = csv.writer(fh, lineterminator="\n")
    if header:
        names = ["user", "item", "timestamp"] if stream.bipartite else ["src", "dst", "t"]
        w.writerow(names + ["state_label"]
                   + [f"f{k}" for k in range(stream.edge_feat_dim)])
    offset = stream.num_users if stream.bipartite else 0
    for i in range(len(stream)):
        label = "" if stream.labels is None or stream.labels[i] < 0 else int(stream.labels[i])
        w.writerow([int(stream.src[i]), int(stream.dst[i]) - offset, repr(float(stream.t[i])), label]
                   + [repr(float(x)) for x in stream.edge_feat[i]])
    data = fh.getvalue().encode("utf-8")
    if path.suffix == ".gz":
        # no mtime or file name in the header, so output is byte-reproducible
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    """Chronological index ranges plus the inductive node mask."""

    train: range
    val: range
    test: range
    mode: str = "transductive"
    masked_nodes: frozenset[int] = field(default_factory=frozenset)
    train_index: np.ndarray | None = None

    def train_events(self) -> np.ndarray:
        """Stream indices used for training (masked-node events removed)."""
        if self.train_index is not None:
            return self.train_index
        return np.arange(self.train.start, self.train.stop)

    def eval_mask(self, stream: EventStream, part: range, mode: str | None = None) -> np.ndarray:
        """Boolean mask over ``part`` of the events that are scored in ``mode``."""
        mode = mode or self.mode
        n = len(part)
        if mode == "transductive":
            return np.ones(n, dtype=bool)
        if mode != "inductive":
            raise ConfigurationError(f"unknown evaluation mode {mode!r}")
        if not self.masked_nodes:
            raise ConfigurationError("inductive evaluation requested but no nodes are masked")
        masked = np.fromiter(self.masked_nodes, dtype=np.int64)
        sl = slice(part.start, part.stop)
        return np.isin(stream.src[sl], masked) | np.isin(stream.dst[sl], masked)


def chronological_split(stream: EventStream, train_frac: float = 0.70, val_frac: float = 0.15) -> SplitPlan:
    """Split by event count: floor(train), floor(val), remainder to test."""
    n = len(stream)
    if n == 0:
        raise StateError("cannot split an empty stream")
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac >= 1:
        raise ParameterError(f"bad split fractions {train_frac}/{val_frac}")
    n_train = int(math.floor(n * train_frac + 1e-9))
    n_val = int(math.floor(n * val_frac + 1e-9))
    return SplitPlan(range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, n))


def inductive_mask(stream: EventStream, plan: SplitPlan, fraction: float = 0.10, seed: int = 0) -> SplitPlan:
    """Hide a random ``fraction`` of the val/test nodes from training."""
    if not 0.0 < fraction < 1.0:
        raise ParameterError(f"inductive fraction must be in (0, 1), got {fraction}")
    lo, hi = plan.val.start, plan.test.stop
    candidates = np.unique(np.concatenate([stream.src[lo:hi], stream.dst[lo:hi]]))
    n_mask = int(math.floor(fraction * len(candidates)))
    if n_mask == 0:
        raise ConfigurationError("inductive mask is empty: no evaluation events would remain")
    rng = np.random.default_rng(seed)
    masked = np.sort(rng.choice(candidates, size=n_mask, replace=False))
    tr = np.arange(plan.train.start, plan.train.stop)
    touches = np.isin(stream.src[tr], masked) | np.isin(stream.dst[tr], masked)
    return SplitPlan(plan.train, plan.val, plan.test, "inductive",
                     frozenset(int(m) for m in masked), tr[~touches])


# ---------------------------------------------------------------------------
# batches and negatives
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    index: np.ndarray          # stream indices of the positives
    src: np.ndarray
    dst: np.ndarray
    t: np.ndarray
    neg_dst: np.ndarray

    def __len__(self) -> int:
        return len(self.index)


def make_batches(index, batch_size: int = 200) -> Iterator[np.ndarray]:
    """Consecutive chronological slices of ``index``; the last one may be short."""
    if batch_size < 1:
        raise ParameterError(f"batch size must be >= 1, got {batch_size}")
    index = np.asarray(index, dtype=np.int64) if not isinstance(index, range) else np.arange(index.start, index.stop)
    for start in range(0, len(index), batch_size):
        yield index[start:start + batch_size]


def negative_sample(dst: np.ndarray, universe: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One uniform negative destination per positive, never equal to its positive."""
    dst = np.asarray(dst, dtype=np.int64)
    universe = np.asarray(universe, dtype=np.int64)
    if len(universe) == 0:
        raise SamplingError("empty destination universe")
    if len(universe) == 1 and np.any(dst == universe[0]):
        raise SamplingError("destination universe has a single node equal to the positive destination")
    out = universe[rng.integers(0, len(universe), size=len(dst))]
    clash = out == dst
    while clash.any():
        out[clash] = universe[rng.integers(0, len(universe), size=int(clash.sum()))]
        clash = out == dst
    return out


def build_batch(stream: EventStream, index: np.ndarray, rng: np.random.Generator) -> Batch:
    neg = negative_sample(stream.dst[index], stream.dst_universe(), rng)
    return Batch(index, stream.src[index], stream.dst[index], stream.t[index], neg)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def partner_map(num_nodes: int, seed: int) -> np.ndarray:
    """The hidden pairing used by :func:`synth_recurrent` (an involution)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_nodes)
    partner = np.arange(num_nodes)
    for a, b in zip(perm[0::2], perm[1::2]):
        partner[a], partner[b] = b, a
    if num_nodes % 2:
        # odd node out shares the first pair's partner
        partner[perm[-1]] = perm[0]
    return partner


def synth_recurrent(num_nodes: int = 100, num_events: int = 10_000, recurrence_prob: float = 0.9,
                    noise: float = 0.1, seed: int = 0, feat_dim: int = 4) -> EventStream:
    """Stream where each node mostly re-links to a hidden preferred partner.

    Sources are uniform; with probability ``recurrence_prob`` the destination
    is the source's partner, otherwise a uniform node other than the source.
    Timestamps are unit-spaced with jitter ``noise`` (kept strictly increasing).
    """
    if num_nodes < 4:
        raise ParameterError("synth_recurrent needs at least 4 nodes")
    if not 0.0 <= recurrence_prob <= 1.0:
        raise ParameterError("recurrence_prob must be in [0, 1]")
    if not 0.0 <= noise < 0.5:
        raise ParameterError("noise must be in [0, 0.5)")
    partner = partner_map(num_nodes, seed)
    rng = np.random.default_rng([seed, 1])
    src = rng.integers(0, num_nodes, size=num_events)
    recur = rng.random(num_events) < recurrence_prob
    rand_dst = rng.integers(0, num_nodes - 1, size=num_events)
    rand_dst = rand_dst + (rand_dst >= src)
    dst = np.where(recur, partner[src], rand_dst)
    t = np.arange(1, num_events + 1, dtype=np.float64) + rng.uniform(-noise, noise, size=num_events)
    feats = rng.normal(0.0, 1.0, size=(num_events, feat_dim))
    return EventStream(src, dst, t, feats, num_nodes)
