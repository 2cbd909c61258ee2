"""Seeded, splittable random streams.

Uniforms come from numpy's counter-based Philox generator keyed by
(seed, stream path); Gaussians are produced from those uniforms with the
Box-Muller transform so the normal stream depends only on the uniform stream.
"""
from __future__ import annotations

import numpy as np


class Rng:
    """Deterministic random stream identified by a seed and a stream path.

    ``split(i)`` derives an independent child stream, which is how hypotheses,
    workers and per-sample generators get their own randomness.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        key = ss.generate_state(2, dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def split(self, index: int) -> "Rng":
        return Rng(self.seed, self.stream + (int(index),))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        """Uniform draws on the half-open interval (low, high]."""
        u = 1.0 - self._gen.random(size)
        return low + (high - low) * u

    def normal(self, size=None):
        """Standard normal draws via Box-Muller."""
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = z[:n]
        return float(z[0]) if not shape else z.reshape(shape)

    def integers(self, high: int, size=None):
        return self._gen.integers(0, high, size=size)

    def choice(self, n: int, size=None, p=None):
        """Index draws from range(n), optionally with probabilities p (inverse CDF)."""
        if p is None:
            return self.integers(n, size)
        cdf = np.cumsum(np.asarray(p, dtype=np.float64))
        cdf /= cdf[-1]
        u = self._gen.random(size)
        return np.searchsorted(cdf, u, side="right")

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def gaussian_sample(rng: Rng, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. standard normal values from ``rng``."""
    if int(n) < 1:
        raise ValueError(f"gaussian_sample needs n >= 1, got {n}")
    return rng.normal(int(n))
