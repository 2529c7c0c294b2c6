"""Deterministic seeded randomness.

Every random draw in the pipeline flows through a SeedKey
(root, stream, index); there are no ambient entropy sources. The key is
mixed with a splitmix64-style avalanche into a 64-bit seed for numpy's
PCG64, so identical triples give identical streams and distinct triples
give independent ones.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class SeedKey:
    root: int
    stream: str = ""
    index: int = 0

    def child(self, stream: str, index: int = 0) -> "SeedKey":
        sub = stream if not self.stream else f"{self.stream}/{stream}"
        return SeedKey(self.root, sub, index)

    def at(self, index: int) -> "SeedKey":
        return SeedKey(self.root, self.stream, index)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _stream_hash(stream: str) -> int:
    return int.from_bytes(hashlib.blake2b(stream.encode(), digest_size=8).digest(), "little")


def mix(key: SeedKey) -> int:
    """64-bit seed derived from the key triple."""
    x = key.root & _MASK
    x = _splitmix64(x ^ _stream_hash(key.stream))
    x = _splitmix64(x ^ (key.index & _MASK))
    return x


def derive_seed(key: SeedKey) -> np.random.Generator:
    """Generator state for a key; same triple -> same stream."""
    return np.random.Generator(np.random.PCG64(mix(key)))


def standard_normal(state: np.random.Generator, shape) -> np.ndarray:
    """i.i.d. N(0,1) float64 draws (PCG64 uniforms through numpy's ziggurat)."""
    return state.standard_normal(shape, dtype=np.float64)
