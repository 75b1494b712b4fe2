"""Seeded random streams with a fixed, platform-independent definition.

The bit source is PCG64 (XSL-RR 128/64) as shipped by ``numpy.random.PCG64``,
seeded through ``numpy.random.SeedSequence``; only its raw 64-bit output is
used. Uniform doubles take the top 53 bits of each word. Normal variates use
the Box-Muller transform on consecutive uniform pairs: for ``u1, u2`` the pair
``r*cos(2*pi*u2), r*sin(2*pi*u2)`` with ``r = sqrt(-2*ln(1 - u1))`` is emitted
in that order.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

_TWO_POW_M53 = 1.0 / (1 << 53)


class SeededRng:
    def __init__(self, seed: int | Sequence[int]):
        self.seed = seed
        self._bits = np.random.PCG64(np.random.SeedSequence(seed))

    def spawn(self, index: int) -> "SeededRng":
        """Independent child stream for item ``index``; does not advance this stream."""
        base = list(self.seed) if isinstance(self.seed, (list, tuple)) else [self.seed]
        return SeededRng(base + [index])

    def uniform(self, size: int | tuple[int, ...] | None = None):
        n = 1 if size is None else int(np.prod(size))
        raw = self._bits.random_raw(n)
        u = (raw >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, shape: tuple[int, ...], mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return mean + std * z.reshape(shape)

    def integers(self, high: int) -> int:
        """Uniform integer in ``[0, high)``."""
        return min(int(self.uniform() * high), high - 1)

    def bernoulli(self, p: float = 0.5) -> bool:
        return self.uniform() < p

    def get_state(self) -> dict:
        st = self._bits.state
        return {"seed": self.seed, "state": int(st["state"]["state"]), "inc": int(st["state"]["inc"]),
                "has_uint32": int(st["has_uint32"]), "uinteger": int(st["uinteger"])}

    def set_state(self, state: dict) -> None:
        self.seed = state["seed"]
        self._bits.state = {
            "bit_generator": "PCG64",
            "state": {"state": state["state"], "inc": state["inc"]},
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(0)
        rng.set_state(state)
        return rng
