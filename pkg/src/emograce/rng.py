"""Named, splittable random streams.

Every stochastic component draws from a Philox (4x64, 128-bit key) counter
generator whose key is SHA-256(f"{seed}:{stream_name}") truncated to 128
bits, little-endian. Identical (seed, name) pairs therefore replay the same
stream on any machine, and unrelated components never share state.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def stream_generator(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))


class SeedStream:
    """A point in the stream namespace; children are derived by name."""

    def __init__(self, seed: int, path: str = ""):
        self.seed = seed
        self.path = path

    def child(self, name: str) -> "SeedStream":
        path = f"{self.path}/{name}" if self.path else name
        return SeedStream(self.seed, path)

    def key(self) -> int:
        return stream_key(self.seed, self.path)

    def generator(self) -> np.random.Generator:
        return stream_generator(self.seed, self.path)

    def __repr__(self) -> str:
        return f"SeedStream(seed={self.seed}, path={self.path!r})"
