"""Counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, stream, *keys)``.  Keys are things like a batch ordinal and a row
index, so results never depend on the order in which work is scheduled.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"init": 0, "data": 1, "dropout": 2, "eval": 3, "census": 4, "bench": 5}

_MASK64 = (1 << 64) - 1


def derive(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, stream, *keys)``."""
    if stream not in STREAMS:
        raise KeyError(f"unknown random stream {stream!r}")
    entropy = [int(seed) & _MASK64, STREAMS[stream], *(int(k) & _MASK64 for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


class Rng:
    """A seed plus named sub-streams; ``rng.stream("data", 3, 7)``."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, name: str, *keys: int) -> np.random.Generator:
        return derive(self.seed, name, *keys)

    def __repr__(self):
        return f"Rng(seed={self.seed})"
