"""Seeded randomness.

All draws go through :class:`RandomState`, a thin wrapper over numpy's PCG64
bit generator.  Normals come from the Box-Muller transform of uniform pairs
and geometric variables from inverse-CDF, so the streams depend only on the
uniform generator and are identical across platforms.
"""

from __future__ import annotations

import numpy as np


class RandomState:
    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def position(self) -> dict:
        """Bit-generator state; restoring it replays the stream."""
        return self._gen.bit_generator.state

    @position.setter
    def position(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def spawn(self, n: int) -> list["RandomState"]:
        """Independent child streams, derived deterministically from this one."""
        seeds = self._gen.integers(0, 2**63 - 1, size=n)
        return [RandomState(int(s)) for s in seeds]

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return low + (high - low) * self._gen.random(size)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        # 1 - U lies in (0, 1], so the log is finite
        u1 = 1.0 - self._gen.random(m)
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        t = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(t), r * np.sin(t)])[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def geometric(self, p: float, size=None):
        """Geometric on {1, 2, ...} with P(N = k) = p (1-p)^(k-1)."""
        if not 0.0 < p <= 1.0:
            raise ValueError(f"geometric needs 0 < p <= 1, got {p}")
        if p == 1.0:
            return 1 if size is None else np.ones(size, dtype=np.int64)
        u = 1.0 - self._gen.random(size)
        k = np.ceil(np.log(u) / np.log1p(-p))
        k = np.maximum(k, 1).astype(np.int64)
        return int(k) if size is None else k

    def poisson(self, lam: float, size=None):
        if not lam > 0.0:
            raise ValueError(f"poisson needs lam > 0, got {lam}")
        out = self._gen.poisson(lam, size)
        return int(out) if size is None else out.astype(np.int64)

    def permutation(self, n: int):
        return self._gen.permutation(n)


def rng_draw(kind: str, rng: RandomState, size=None, **params):
    """Dispatch a draw by name: ``normal``, ``uniform``, ``geometric(p)``, ``poisson(lam)``."""
    if kind == "normal":
        return rng.normal(size)
    if kind == "uniform":
        return rng.uniform(size, params.get("low", 0.0), params.get("high", 1.0))
    if kind == "geometric":
        return rng.geometric(params["p"], size)
    if kind == "poisson":
        return rng.poisson(params["lam"], size)
    raise ValueError(f"unknown distribution {kind!r}")
