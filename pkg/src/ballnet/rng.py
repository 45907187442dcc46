"""Reproducible random streams.

Every stream is a Philox (counter-based) generator keyed by a root seed and a
tuple of integers such as ``(match_index,)`` or ``(season, chain)``; streams
derived from different keys are independent and can be generated in any order.
"""

from __future__ import annotations

import numpy as np

GENERATOR_NAME = "philox4x64"


def stream(seed: int, *key: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def uniform(rng: np.random.Generator) -> float:
    return float(rng.random())


def exponential(rate: float, u: float) -> float:
    """Inverse-CDF Exponential variate from a uniform ``u`` in [0, 1)."""
    return float(-np.log1p(-u) / rate)


def categorical(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF categorical draw."""
    cdf = np.cumsum(probs)
    k = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(k, len(probs) - 1)
