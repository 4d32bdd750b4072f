"""Named sub-seeds derived from one run seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit seed for the stream identified by ``names``."""
    key = ":".join([str(int(seed))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def rng_for(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
