"""Counter-based, splittable random streams.

Every stream is a Philox generator keyed by ``SeedSequence([seed, *path])``;
stream (seed, k) is the same no matter which worker draws from it or in which
order, which is what makes multi-chain runs reproducible.
"""
from __future__ import annotations

import numpy as np


def stream(seed: int, *path: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(p) for p in path)])
    return np.random.Generator(np.random.Philox(ss))


def tag(name: str) -> int:
    """Stable integer for a string label (used as a stream path component)."""
    h = 1469598103934665603
    for b in name.encode():
        h = ((h ^ b) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
    return h
