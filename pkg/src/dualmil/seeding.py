"""Per-purpose random streams derived from one 64-bit seed.

A stream is keyed by (seed, crc32(purpose), *indices), so adding a new
consumer never shifts the draws of existing ones.
"""

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_rng(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    key = [int(seed) & _MASK64, zlib.crc32(purpose.encode())] + [int(i) for i in indices]
    return np.random.default_rng(np.random.SeedSequence(key))
