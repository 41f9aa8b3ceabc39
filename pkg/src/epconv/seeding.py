"""Deterministic RNG streams.

Every stochastic component draws from its own named substream of a single
root seed, so runs are reproducible regardless of which components happen
to execute or in what order.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the substream identified by ``names`` under ``seed``.

    The same (seed, names) pair always yields an identical generator;
    distinct names yield statistically independent streams.
    """
    keys = [n if isinstance(n, int) else _name_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=keys))


def _name_key(name: str) -> int:
    # Stable string -> int mapping; hash() is salted per process so it
    # cannot be used here.
    key = 0
    for ch in name.encode("utf-8"):
        key = (key * 31 + ch) % (2**31 - 1)
    return key
