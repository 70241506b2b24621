"""Named, counter-based random streams.

Every consumer asks for its own stream by ``(seed, name, index)``.  Streams are
Philox generators keyed on those three values, so results never depend on the
order in which other streams were drawn or on how work is split across workers.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    tag = zlib.crc32(name.encode("utf-8"))
    key = np.array([seed & _MASK64, ((tag << 32) ^ (index & 0xFFFFFFFF)) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def child_seed(seed: int, name: str, index: int = 0) -> int:
    """Derive a deterministic 31-bit seed for a nested component."""
    return int(stream(seed, name, index).integers(0, 2**31 - 1))
