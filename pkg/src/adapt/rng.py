"""Seedable deterministic randomness with named sub-streams.

One PCG64 generator per stream; sub-streams are derived from the root seed
plus a name path (hashed with SHA-256), never from the parent's state. This
means toggling one consumer (say, the dropout augmentation) cannot shift
the draws seen by any other consumer, and the same seed always reproduces
bit-identical sequences.

A stream is single-owner: share work across threads by splitting first,
never by handing one stream to two consumers.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


class RandomStream:
    """A named, seeded draw sequence backed by numpy's PCG64."""

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF] + [_name_key(p) for p in self.path]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def split(self, name: str) -> "RandomStream":
        """Derive an independent child stream; unaffected by this stream's state."""
        return RandomStream(self.seed, self.path + (name,))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def random(self, size=None):
        return self._gen.random(size=size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace: bool = True):
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"
