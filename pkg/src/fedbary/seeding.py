"""Seed derivation shared by every random stream in the package.

A stream is identified by ``(seed, stream tag, index)`` and mapped to a
64-bit integer with SplitMix64::

    derive_seed(seed, tag, index) = splitmix64(splitmix64(seed ^ tag) ^ index)

The result seeds a numpy ``PCG64`` generator. Instance files record this
scheme under ``meta.rng`` so a generated instance can be traced back to its
seed; golden tests still ship pre-generated files because bit-equal
normal draws across numpy versions are not guaranteed.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
RNG_DESCRIPTION = "numpy.PCG64 seeded by splitmix64(splitmix64(seed ^ tag) ^ index)"

# stream tags
TIES = 0x7469
BATCH = 0x6261
DATA = 0x6461
CANDIDATES = 0x6361
RECOVERY = 0x7263
BASELINE = 0x626C


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, tag: int, index: int = 0) -> int:
    return splitmix64(splitmix64((seed & MASK64) ^ tag) ^ (index & MASK64))


def stream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, tag, index)))
