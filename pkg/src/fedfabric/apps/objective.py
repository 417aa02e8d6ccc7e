"""Synthetic ground truth: a seeded quadratic bowl plus a small sinusoid.

``Objective.value`` plays the role of the expensive simulation.  Knowing it in
closed form lets efficacy be measured exactly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Objective:
    d: int = 16
    seed: int = 0
    center_scale: float = 1.0
    curvature: float = 1.0
    sin_amplitude: float = 0.3
    sin_frequency: float = 1.5
    sign: float = 1.0  # +1: peak at the center (maximize), -1: basin (minimize)
    center: np.ndarray = field(init=False, repr=False, compare=False)
    _weights: np.ndarray = field(init=False, repr=False, compare=False)
    _phase: np.ndarray = field(init=False, repr=False, compare=False)
    _dirs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 0x0B1E])
        object.__setattr__(self, "center", rng.normal(0, self.center_scale, self.d))
        # anisotropic bowl, weights in [0.5, 1.5] times curvature
        object.__setattr__(self, "_weights", self.curvature * rng.uniform(0.5, 1.5, self.d))
        object.__setattr__(self, "_dirs", rng.normal(0, 1, (4, self.d)) / np.sqrt(self.d))
        object.__setattr__(self, "_phase", rng.uniform(0, 2 * np.pi, 4))

    def value(self, x: np.ndarray) -> np.ndarray:
        """g(x) for one vector or a batch of row vectors."""
        x = np.asarray(x, dtype=float)
        diff = x - self.center
        bowl = -np.sum(self._weights * diff * diff, axis=-1)
        wave = self.sin_amplitude * np.sum(np.sin(self.sin_frequency * (x @ self._dirs.T) + self._phase), axis=-1)
        return self.sign * (bowl + wave)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        diff = x - self.center
        g_bowl = -2 * self._weights * diff
        c = np.cos(self.sin_frequency * (x @ self._dirs.T) + self._phase)
        g_wave = self.sin_amplitude * self.sin_frequency * (c @ self._dirs)
        return self.sign * (g_bowl + g_wave)


def make_pool(n: int, d: int = 16, seed: int = 0, spread: float = 1.5) -> np.ndarray:
    """Candidate feature vectors, one row per candidate id."""
    return np.random.default_rng([seed, 0x9001]).normal(0, spread, (n, d))


def top_decile_threshold(values: np.ndarray) -> float:
    """Exact cut such that ``n // 10`` values lie strictly above it (distinct values)."""
    v = np.sort(np.asarray(values, dtype=float))
    n = len(v)
    if n == 0:
        raise ValueError("empty pool")
    k = n // 10
    return float(v[n - k - 1])


def label(obj: Objective, x: np.ndarray, noise: float = 0.0, seed: int = 0) -> float:
    y = float(obj.value(x))
    if noise > 0:
        y += float(np.random.default_rng([seed, 0x5EED]).normal(0, noise))
    return y


# -- array codec ------------------------------------------------------------------


def pack(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def unpack(data: bytes) -> np.ndarray:
    return np.load(io.BytesIO(data), allow_pickle=False)
