"""Numerical substrate: seeded random streams and basic sample statistics.

Arrays are plain ``numpy.ndarray`` objects in float64, C (row-major) order.

Random numbers come from numpy's PCG64 bit generator seeded through
``SeedSequence(entropy=seed, spawn_key=stream)``. Both algorithms are
published (O'Neill 2014; numpy NEP 19), so a reimplementation that adopts
them reproduces every stream. Independent substreams are derived by
extending the spawn key, which is how parallel callers must split work.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

Shape = int | Sequence[int]


def _as_shape(shape: Shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    return shape


class Rng:
    """A deterministic random stream identified by ``(seed, stream)``.

    ``spawn(*keys)`` returns a child stream whose identity is
    ``(seed, stream + keys)``; it does not advance the parent. Keys are
    non-negative integers or short strings (hashed to integers).
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.stream = tuple(int(k) for k in stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, *keys: int | str) -> "Rng":
        return Rng(self.seed, self.stream + tuple(_key(k) for k in keys))

    def normal(self, shape: Shape) -> np.ndarray:
        return self._gen.standard_normal(_as_shape(shape))

    def uniform(self, shape: Shape) -> np.ndarray:
        return self._gen.random(_as_shape(shape))

    def integers(self, low: int, high: int, size: Shape) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=_as_shape(size))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        return self._gen.choice(n, size=k, replace=False)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def _key(k: int | str) -> int:
    if isinstance(k, str):
        # FNV-1a, 32 bit: stable across runs, unlike hash().
        h = 0x811C9DC5
        for byte in k.encode():
            h = ((h ^ byte) * 0x01000193) & 0xFFFFFFFF
        return h
    if k < 0:
        raise ValueError("stream keys must be non-negative")
    return int(k)


def sample_standard_normal(rng: Rng, shape: Shape) -> np.ndarray:
    return rng.normal(shape)


def sample_uniform01(rng: Rng, shape: Shape) -> np.ndarray:
    """i.i.d. draws on the half-open interval [0, 1)."""
    return rng.uniform(shape)


def mean_and_covariance(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased (n - 1) covariance of an ``n x d`` array."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be an n x d array")
    n = samples.shape[0]
    if n < 2:
        raise ValueError("insufficient samples")
    mean = samples.mean(axis=0)
    centred = samples - mean
    cov = centred.T @ centred / (n - 1)
    # exact symmetry, not just up to rounding
    cov = 0.5 * (cov + cov.T)
    return mean, cov
