"""Counter-based random source.

A draw is fully determined by (seed, stream, counter): the Philox key holds
seed and stream, and each call occupies its own 2^128-wide slice of the
256-bit Philox counter space, so parallel consumers can reproduce any single
draw without replaying history.
"""

from __future__ import annotations

import numpy as np

from ..exceptions import ContractViolation

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """Deterministic 64-bit mixer used to derive sub-stream ids."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RandomSource:
    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        if not (0 <= seed <= _MASK64):
            raise ContractViolation(f"seed must be u64, got {seed}")
        if not (0 <= stream <= _MASK64):
            raise ContractViolation(f"stream must be u64, got {stream}")
        if counter < 0:
            raise ContractViolation(f"counter must be non-negative, got {counter}")
        self.seed = int(seed)
        self.stream = int(stream)
        self.counter = int(counter)

    def _next_generator(self) -> np.random.Generator:
        key = self.seed | (self.stream << 64)
        bg = np.random.Philox(key=key, counter=self.counter << 128)
        self.counter += 1
        return np.random.Generator(bg)

    def gaussian(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ContractViolation(f"std must be >= 0, got {std}")
        g = self._next_generator()
        out = g.standard_normal(shape, dtype=np.float32)
        if std != 1.0:
            out = out * np.float32(std)
        if mean != 0.0:
            out = out + np.float32(mean)
        return out

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        if not low < high:
            raise ContractViolation(f"uniform requires low < high, got [{low}, {high})")
        g = self._next_generator()
        u = g.random(shape, dtype=np.float32)
        return (u * np.float32(high - low) + np.float32(low)).astype(np.float32)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        if not low < high:
            raise ContractViolation(f"integers requires low < high, got [{low}, {high})")
        g = self._next_generator()
        return g.integers(low, high, size=shape, dtype=np.int64)

    def fork(self, tag: int) -> "RandomSource":
        """Independent child stream; deterministic in (self.stream, tag)."""
        mixed = splitmix64((self.stream ^ splitmix64(tag & _MASK64)) & _MASK64)
        return RandomSource(self.seed, stream=mixed, counter=0)

    def clone(self) -> "RandomSource":
        return RandomSource(self.seed, self.stream, self.counter)

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, stream={self.stream}, counter={self.counter})"
