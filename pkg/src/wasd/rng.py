"""Frozen 64-bit hashing and uniform streams.

Everything that must be reproducible across machines (toy-transformer
weights, planted-model activations, token hashing) goes through SplitMix64:

    state <- state + 0x9E3779B97F4A7C15            (mod 2**64)
    z <- (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
    z <- (z ^ (z >> 27)) * 0x94D049BB133111EB
    z <- z ^ (z >> 31)

A uniform double in [0, 1) is ``(z >> 11) * 2**-53``.  The i-th element
(i = 0, 1, ...) of a stream seeded with ``s`` uses state ``s + (i + 1) * gamma``,
so a whole stream can be generated in one vectorised step.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 finaliser on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def combine(*parts: int) -> int:
    """Hash an ordered tuple of integers into one 64-bit value."""
    h = 0
    for p in parts:
        h = mix64((h + GAMMA + (p & MASK64)) & MASK64)
    return h


def mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def uniform_stream(seed: int, n: int) -> np.ndarray:
    """First ``n`` SplitMix64 uniforms in [0, 1) for ``seed``."""
    idx = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed & MASK64) + idx * np.uint64(GAMMA)
    z = mix64_array(state)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def to_unit(h: int) -> float:
    """Map a 64-bit hash to [0, 1)."""
    return (h >> 11) * (1.0 / (1 << 53))
