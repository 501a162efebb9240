"""Deterministic random streams built on splitmix64.

Every random quantity in the package (weight init, categorical draws,
synthetic trajectories, property-test batches) comes from these streams so
that runs are bit-reproducible from a single 64-bit seed, independent of
numpy's global RNG state.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_INV_2_53 = float(2.0**-53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def u64_stream(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """First ``n`` outputs (after ``offset``) of splitmix64 seeded with ``seed``.

    Output ``i`` equals mix(seed + (i+1)*golden), which is exactly the i-th
    value of the sequential generator, so chunked and streaming use agree.
    """
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix((np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _GOLDEN) & _U64_MASK)


def uniforms(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Uniforms in [0, 1) with 53-bit resolution."""
    return (u64_stream(seed, n, offset) >> np.uint64(11)).astype(np.float64) * _INV_2_53


def normals(seed: int, n: int, offset_pairs: int = 0) -> np.ndarray:
    """Standard normals via Box-Muller over consecutive uniform pairs.

    Pair k consumes raw outputs 2k and 2k+1; both normals of a pair are
    emitted in order, and a trailing odd request drops the sine member.
    The log argument is shifted into (0, 1] so it never hits zero.
    """
    pairs = (n + 1) // 2
    raw = u64_stream(seed, 2 * pairs, offset=2 * offset_pairs)
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]


class SplitMix64:
    """Sequential stateful view of the same stream, for sampler-side draws."""

    def __init__(self, seed: int):
        self._state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self) -> int:
        with np.errstate(over="ignore"):
            self._state = (self._state + _GOLDEN) & _U64_MASK
            return int(_mix(self._state))

    def next_uniform(self) -> float:
        """Uniform in [0, 1)."""
        return (self.next_u64() >> 11) * _INV_2_53

    def categorical(self, probs: np.ndarray) -> int:
        """Inverse-CDF draw from a probability vector (sums to 1)."""
        u = self.next_uniform()
        cdf = np.cumsum(probs)
        return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))
