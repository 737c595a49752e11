"""Deterministic counter-based random streams.

All randomness in the toolkit flows through splitmix64 / xoshiro256**,
vectorized over numpy uint64 lanes. Every consumer derives its own lane
from (master seed, stream index), so a field of per-pixel noise is a pure
function of the seed and the pixel index: serial, chunked, or parallel
evaluation produces bit-identical results.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = float(2.0 ** -53)


def mix64(x):
    """splitmix64 output finalizer (bijective avalanche mix) on uint64 data."""
    z = np.asarray(x, dtype=np.uint64)
    scalar = z.ndim == 0
    z = np.atleast_1d(z)  # 0-d arrays hit numpy's warning-prone scalar path
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return z[0] if scalar else z


def derive_seed(master: int, index: int) -> int:
    """Stable 64-bit sub-seed for stage `index` of a run seeded with `master`."""
    base = mix64(np.array([master & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    base = base + np.uint64(index & 0xFFFFFFFFFFFFFFFF)
    return int(mix64(base)[0])


def _rotl(x, k: int):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Xoshiro256StarStar:
    """Vectorized xoshiro256** with one independent lane per stream index.

    Lane state is seeded by running splitmix64 from
    ``mix64(stream ^ mix64(seed))``, the generator family's reference
    seeding procedure, so lanes for different (seed, stream) pairs are
    decorrelated.
    """

    def __init__(self, seed: int, streams=0):
        streams = np.atleast_1d(np.asarray(streams, dtype=np.uint64))
        base = mix64(streams ^ mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
        state = []
        s = base
        for _ in range(4):
            s = s + _GOLDEN
            state.append(mix64(s))
        self._s = state
        self.n_lanes = streams.shape[0]

    def next_u64(self) -> np.ndarray:
        """One 64-bit output per lane."""
        s0, s1, s2, s3 = self._s
        out = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return out

    def uniform01(self) -> np.ndarray:
        """One double in [0, 1) per lane (53-bit resolution)."""
        return (self.next_u64() >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self) -> np.ndarray:
        """One standard-normal double per lane (Box-Muller, two draws)."""
        u1 = self.uniform01()
        u2 = self.uniform01()
        r = np.sqrt(-2.0 * np.log1p(-u1))
        return r * np.cos(2.0 * np.pi * u2)


def gaussian_field(seed: int, shape, stream_offset: int = 0) -> np.ndarray:
    """Standard-normal field with one lane per element.

    Element k (row-major) uses stream ``stream_offset + k``; any spatial
    partition of the work reproduces the same values lane-by-lane.
    """
    n = int(np.prod(shape))
    streams = np.arange(n, dtype=np.uint64) + np.uint64(stream_offset)
    return Xoshiro256StarStar(seed, streams).normal().reshape(shape)


class Stream:
    """Sequential draws from a single lane, for scalar parameter sampling."""

    def __init__(self, seed: int, stream: int = 0):
        self._gen = Xoshiro256StarStar(seed, np.uint64(stream))

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        if size is None:
            return lo + (hi - lo) * float(self._gen.uniform01()[0])
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        flat = np.array([self.uniform(lo, hi) for _ in range(n)])
        return flat.reshape(shape)

    def normal(self, size=None):
        if size is None:
            return float(self._gen.normal()[0])
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        flat = np.array([self.normal() for _ in range(n)])
        return flat.reshape(shape)

    def randint(self, lo: int, hi=None) -> int:
        """Uniform integer in [lo, hi), or in [0, lo) when hi is omitted."""
        if hi is None:
            lo, hi = 0, lo
        if hi <= lo:
            raise ValueError(f"randint needs an non-empty range, got [{lo}, {hi})")
        return lo + int(self.uniform(0.0, float(hi - lo)))

    def sample_indices(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), order-stable partial Fisher-Yates."""
        if k > n:
            raise ValueError("cannot sample more indices than available")
        pool = np.arange(n)
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return np.sort(pool[:k])
