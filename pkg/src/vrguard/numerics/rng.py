"""Counter-based pseudo-random generator with a platform-stable stream.

The generator is the SplitMix64 output function applied to a strided
counter: ``out_i = mix64(seed_state + (counter + i + 1) * GAMMA)``.  All
arithmetic is unsigned 64-bit with wraparound, done on numpy uint64 arrays
(numpy defines silent modular wrap for unsigned arrays), so the stream
depends only on the seed — not on platform, numpy version, or call
batching.  Constants are the published SplitMix64 ones.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = 0xFFFFFFFFFFFFFFFF


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return (z ^ (z >> 31)) & _MASK


class SeededRng:
    """Deterministic random source; identical seeds give identical streams."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self._counter = 0

    def _raw(self, n: int) -> np.ndarray:
        """Next `n` uint64 words, advancing the counter."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64(np.uint64(self.seed) + idx * np.uint64(_GAMMA))

    def split(self, tag: int) -> "SeededRng":
        """Independent child stream; same (seed, tag) always gives the same child."""
        return SeededRng(_mix64_int(self.seed ^ _mix64_int(int(tag) + 0x1D8AF3)))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform float64 samples in [low, high) using the top 53 bits."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) / float(1 << 53)
        out = low + (high - low) * u
        return out.reshape(shape) if shape else float(out[0])

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        """Standard Box-Muller normals (pairs drawn from the uniform stream)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = (self._raw(half) >> np.uint64(11)).astype(np.float64) / float(1 << 53)
        u2 = (self._raw(half) >> np.uint64(11)).astype(np.float64) / float(1 << 53)
        u1 = 1.0 - u1  # move to (0, 1] so log() is safe
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        out = loc + scale * z
        return out.reshape(shape) if shape else float(out[0])

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) by multiply-shift reduction of the top 32 bits.

        Spans must stay below 2**32 (true for every use in this package).
        """
        if high <= low:
            raise ConfigError(f"integers(): empty range [{low}, {high})")
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        span = high - low
        words = self._raw(n) >> np.uint64(32)
        vals = (words * np.uint64(span)) >> np.uint64(32)
        out = vals.astype(np.int64) + low
        return out.reshape(shape) if shape else int(out[0])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of arange(n), one 32-bit word per swap."""
        perm = np.arange(n)
        if n <= 1:
            return perm
        words = (self._raw(n - 1) >> np.uint64(32)).astype(np.int64)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = (int(words[k]) * (i + 1)) >> 32
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        """k indices drawn from range(n)."""
        if replace:
            return self.integers(0, n, shape=k)
        if k > n:
            raise ConfigError(f"choice(): cannot draw {k} from {n} without replacement")
        return self.permutation(n)[:k]

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return (self.uniform(shape) < p) if shape else (self.uniform() < p)
