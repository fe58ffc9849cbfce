"""Splittable counter-based random streams.

Streams are identified by a root seed plus a tuple of child indices;
two `Rng` objects built from the same (seed, path) yield bit-identical
draws, and children split at distinct indices are independent by
construction (numpy SeedSequence spawn keys over a Philox generator).
Normal variates come from Box-Muller over the uniform stream.
"""
from __future__ import annotations

import math

import numpy as np

__all__ = ["Rng"]


class Rng:
    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(i) for i in _path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, index: int) -> "Rng":
        """Derive an independent stream; same (seed, path, index) -> same stream."""
        return Rng(self.seed, self.path + (int(index),))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        return self._gen.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normal draws via Box-Muller on the uniform stream."""
        n = int(np.prod(shape)) if shape != () else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * math.pi * u2)
        z[1::2] = r * np.sin(2.0 * math.pi * u2)
        z = z[:n]
        if shape == ():
            return z[0]
        return z.reshape(shape)

    def bernoulli_keep(self, keep_prob: float, shape=()) -> np.ndarray:
        """0/1 mask where each entry is 1 with probability keep_prob."""
        return (self._gen.random(shape) < keep_prob).astype(np.float64)

    def gumbel(self, shape=()) -> np.ndarray:
        """Standard Gumbel draws g = -log(-log U)."""
        u = np.clip(self._gen.random(shape), 1e-300, 1.0 - 1e-16)
        return -np.log(-np.log(u))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def categorical(self, probs: np.ndarray) -> int:
        """Single draw from a probability vector by CDF inversion."""
        u = float(self._gen.random())
        c = np.cumsum(probs)
        c[-1] = max(c[-1], 1.0)  # guard against float undershoot
        return int(np.searchsorted(c, u, side="right"))
