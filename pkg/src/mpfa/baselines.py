"""Parameter-free reference scorers: EdgeBank and uniform random scores."""

from __future__ import annotations

import numpy as np

from .events import EventStream


class EdgeMemory:
    """Observed (src, dst) pairs, optionally forgotten after ``window`` time units."""

    def __init__(self, window: float | None = None):
        self.window = window
        self._last_seen: dict[tuple[int, int], float] = {}

    def __len__(self) -> int:
        return len(self._last_seen)

    def insert(self, src: int, dst: int, t: float) -> None:
        key = (int(src), int(dst))
        prev = self._last_seen.get(key)
        if prev is None or t > prev:
            self._last_seen[key] = float(t)

    def contains(self, src: int, dst: int, t: float) -> bool:
        seen = self._last_seen.get((int(src), int(dst)))
        if seen is None:
            return False
        return self.window is None or t - seen <= self.window


def edgebank_score(src: int, dst: int, t: float, memory: EdgeMemory) -> float:
    return 1.0 if memory.contains(src, dst, t) else 0.0


class EdgeBankScorer:
    """EdgeBank behind the common scorer interface (``score`` then ``observe``)."""

    name = "edgebank"

    def __init__(self, window: float | None = None):
        self.memory = EdgeMemory(window)
        self.cursor = 0

    def warm(self, stream: EventStream, index, stop: int | None = None) -> None:
        """Insert the given (already past) events and move the cursor to ``stop``."""
        index = np.asarray(index, dtype=np.int64)
        for i in index.tolist():
            self.memory.insert(stream.src[i], stream.dst[i], stream.t[i])
        if stop is not None:
            self.cursor = stop
        elif len(index):
            self.cursor = int(index[-1]) + 1

    def score(self, stream: EventStream, index: np.ndarray, neg_dst: np.ndarray):
        src, dst, t = stream.src[index], stream.dst[index], stream.t[index]
        pos = np.array([edgebank_score(s, d, tt, self.memory) for s, d, tt in zip(src, dst, t)])
        neg = np.array([edgebank_score(s, d, tt, self.memory) for s, d, tt in zip(src, neg_dst, t)])
        return pos, neg

    def observe(self, stream: EventStream, index: np.ndarray) -> None:
        for i in np.asarray(index).tolist():
            self.memory.insert(stream.src[i], stream.dst[i], stream.t[i])


def random_score(rng: np.random.Generator, size: int | None = None):
    """Uniform score(s) in [0, 1)."""
    return rng.random(size)


class RandomScorer:
    name = "random"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.cursor = 0

    def warm(self, stream: EventStream, index, stop: int | None = None) -> None:
        index = np.asarray(index, dtype=np.int64)
        if stop is not None:
            self.cursor = stop
        elif len(index):
            self.cursor = int(index[-1]) + 1

    def score(self, stream: EventStream, index: np.ndarray, neg_dst: np.ndarray):
        return random_score(self.rng, len(index)), random_score(self.rng, len(index))

    def observe(self, stream: EventStream, index: np.ndarray) -> None:
        pass
