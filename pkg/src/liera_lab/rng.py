"""Counter-based SplitMix64 generator with Box-Muller normals.

The stream is a pure function of ``(seed, counter)`` and is produced with
vectorized ``uint64`` arithmetic, so a given seed yields the same bits on
every platform.
"""
from __future__ import annotations

import math

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, start: int, n: int) -> np.ndarray:
    """Outputs ``start .. start+n-1`` of the SplitMix64 sequence seeded with ``seed``."""
    steps = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed & _MASK64) + steps * _GAMMA
    return _mix(state)


def hash_seed(*keys: int) -> int:
    """Fold integer keys into a single 64-bit seed."""
    h = 0x243F6A8885A308D3
    for key in keys:
        h = int(splitmix64(h ^ (int(key) & _MASK64), 0, 1)[0])
    return h


class Rng:
    """Deterministic generator; ``counter`` counts 64-bit words consumed."""

    algorithm = "splitmix64"

    def __init__(self, seed: int, counter: int = 0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream keyed by ``keys``; does not advance ``self``."""
        return Rng(hash_seed(self.seed, *keys))

    def next_u64(self, n: int) -> np.ndarray:
        out = splitmix64(self.seed, self.counter, n)
        self.counter += n
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in the open interval (0, 1), 53 bits each."""
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """Standard normals; every pair of uniforms yields two samples."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = (2.0 * math.pi) * u[1::2]
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in ``[0, high)`` (multiply-shift on 32 high bits)."""
        hi = self.next_u64(n) >> np.uint64(32)
        return ((hi * np.uint64(high)) >> np.uint64(32)).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
