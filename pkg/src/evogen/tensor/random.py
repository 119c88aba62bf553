"""Named, counter-based random streams.

A :class:`SeedStream` is a value ``(name, counter)``. Every draw is a pure
function of that pair: the name is hashed into a Philox key and the counter
selects the Philox block, so the same pair yields the same numbers on any
platform. Streams never mutate; use :meth:`next` or :meth:`fork` to derive new ones.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_TWO_PI = 2.0 * np.pi


def _shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


@dataclass(frozen=True)
class SeedStream:
    name: str
    counter: int = 0

    def _bitgen(self) -> np.random.Philox:
        key = int.from_bytes(hashlib.sha256(self.name.encode("utf-8")).digest()[:16], "little")
        # Counter occupies the high words so blocks of distinct counters never overlap.
        return np.random.Philox(key=key, counter=[0, 0, self.counter & (2**64 - 1), self.counter >> 64])

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen().random_raw(n)

    def uniform(self, shape) -> np.ndarray:
        """Doubles in the open interval (0, 1)."""
        shape = _shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.raw(n) >> np.uint64(11)
        return ((bits.astype(np.float64) + 0.5) * 2.0**-53).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Standard normals by Box-Muller."""
        shape = _shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        half = (n + 1) // 2
        u = self.uniform((2 * half,))
        u1, u2 = u[:half], u[half:]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)])
        return z[:n].reshape(shape)

    def gumbel(self, shape) -> np.ndarray:
        return -np.log(-np.log(self.uniform(shape)))

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Integers in [0, high) by scaling uniforms."""
        u = self.uniform(shape if shape != () else (1,))
        out = np.minimum((u * high).astype(np.int64), high - 1)
        return out if shape != () else int(out[0])

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable") if n else np.zeros(0, dtype=np.int64)

    def next(self) -> "SeedStream":
        return SeedStream(self.name, self.counter + 1)

    def fork(self, tag) -> "SeedStream":
        return SeedStream(f"{self.name}/{tag}#{self.counter}", 0)
