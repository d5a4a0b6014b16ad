"""Seedable, splittable random streams.

The generator is numpy's Philox4x64-10 counter-based bit generator (256-bit
counter, 128-bit key) keyed through ``SeedSequence``. Child streams are derived
from the parent's seed path plus a stable 32-bit digest of a string tag, so
``split`` is reproducible across platforms and processes.

Uniform doubles come from ``Generator.random`` (53-bit mantissa). Normal draws
use the Box-Muller transform on consecutive uniform pairs ``(u1, u2)``:
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` then ``... * sin(2 pi u2)``.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor

ALGORITHM_ID = "philox4x64-10/seedseq/box-muller-v1"


def _tag_word(tag):
    return int.from_bytes(hashlib.sha256(str(tag).encode()).digest()[:4], "little")


class Rng:
    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self.algorithm_id = ALGORITHM_ID
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"

    def split(self, tag):
        """Independent child stream; does not advance this stream."""
        return Rng(self.seed, self.path + (_tag_word(tag),))

    def uniform(self, size=None):
        """Doubles in [0, 1)."""
        return self._gen.random(size)

    def uniform_range(self, low, high, size=None):
        return low + (high - low) * self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def normal(self, size, mean=0.0, std=1.0):
        """Box-Muller normals as a numpy array."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self._gen.random(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return mean + std * z[:n].reshape(shape)


def gaussian(rng, shape, mean=0.0, std=1.0):
    """Tensor of i.i.d. N(mean, std^2) draws; std == 0 yields the constant mean."""
    if std < 0:
        raise ValueError("std must be non-negative")
    if std == 0:
        return Tensor(np.full(shape, float(mean)))
    return Tensor(rng.normal(shape, mean, std))
