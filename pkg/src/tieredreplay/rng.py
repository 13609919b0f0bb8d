"""Seed handling: every randomized operation takes either an integer seed or
an already-constructed numpy Generator, so callers can hand one long-lived
stream per concern and tests can pin per-call seeds."""

from __future__ import annotations

import numpy as np


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, (int, np.integer)):
        return np.random.default_rng(int(rng))
    raise TypeError(f"expected int seed or numpy Generator, got {type(rng).__name__}")


def substream(seed: int, tag: int) -> np.random.Generator:
    """Deterministic named substream of a master seed."""
    return np.random.default_rng([int(seed), int(tag)])
