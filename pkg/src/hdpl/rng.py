"""Counter-based random streams.

All randomness is a pure function of ``(seed, stream, counter)``: the Philox
bit generator is keyed by ``(seed, stream)`` and positioned at ``counter``.
Nothing is consumed by a draw, so a forward pass replayed with the same
``RngState`` sees exactly the same noise, and sampling in one layer never
shifts the noise seen by another.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

# stream ids; per-layer noise streams are the hybrid layer index
DATA_STREAM = 1 << 40
INIT_STREAM = 1 << 41


@dataclass
class RngState:
    seed: int = 42
    counter: int = 0

    def words(self) -> tuple[int, int]:
        return self.seed & _MASK64, self.counter & _MASK64

    def at(self, counter: int) -> RngState:
        return RngState(self.seed, counter)

    def raw(self, stream: int, n: int) -> np.ndarray:
        key = np.array([self.seed & _MASK64, stream & _MASK64], dtype=np.uint64)
        ctr = np.array([0, self.counter & _MASK64, 0, 0], dtype=np.uint64)
        return np.random.Philox(key=key, counter=ctr).random_raw(n)

    def uniform(self, stream: int, n: int) -> np.ndarray:
        """``n`` doubles in (0, 1]."""
        return ((self.raw(stream, n) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53

    def normal(self, stream: int, shape) -> np.ndarray:
        """Standard normals via Box-Muller, float64."""
        shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniform(stream, 2 * pairs)
        radius = np.sqrt(-2.0 * np.log(u[:pairs]))
        theta = 2.0 * np.pi * u[pairs:]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        return z[:n].reshape(shape)

    def integers(self, stream: int, n: int, high: int) -> np.ndarray:
        """``n`` integers uniform on [0, high)."""
        u = (self.raw(stream, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return np.minimum((u * high).astype(np.int64), high - 1)
