"""Monte Carlo summaries and grid distances."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["EnsembleStats", "l1_distance", "fsum_mean"]

Z95 = 1.959963984540054


def fsum_mean(values, axis: int = 0) -> np.ndarray:
    """Correctly rounded mean along ``axis``, hence independent of sample order."""
    v = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    flat = v.reshape(-1, v.shape[-1])
    out = np.array([math.fsum(row) for row in flat]) / v.shape[-1]
    return out.reshape(v.shape[:-1])


@dataclass
class EnsembleStats:
    """Means and 95% normal-approximation half-widths per tracked point.

    ``samples`` has shape ``(count, ...)``.
    """

    count: int
    mean: np.ndarray
    half_width: np.ndarray

    @classmethod
    def from_samples(cls, samples) -> "EnsembleStats":
        x = np.asarray(samples, dtype=float)
        n = x.shape[0]
        mean = fsum_mean(x, 0)
        if n > 1:
            var = fsum_mean((x - mean) ** 2, 0) * n / (n - 1)
            hw = Z95 * np.sqrt(var / n)
        else:
            hw = np.full_like(mean, np.inf)
        return cls(n, mean, hw)

    @property
    def upper(self) -> np.ndarray:
        return self.mean + self.half_width

    @property
    def lower(self) -> np.ndarray:
        return self.mean - self.half_width


def l1_distance(u, v, h: float | None = None, dim: int | None = None) -> np.ndarray:
    """``h^d sum |u - v|`` over the grid axes (trailing ``dim`` axes)."""
    from ..solver import GridFunction

    if isinstance(u, GridFunction) or isinstance(v, GridFunction):
        if not (isinstance(u, GridFunction) and isinstance(v, GridFunction)) or (u.M, u.dim) != (v.M, v.dim):
            raise ValueError("grid mismatch")
        return float(u.h**u.dim * np.sum(np.abs(u.values - v.values)))
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"grid mismatch: {u.shape} vs {v.shape}")
    dim = 1 if dim is None else dim
    h = 1.0 / u.shape[-1] if h is None else h
    ax = tuple(range(u.ndim - dim, u.ndim))
    return h**dim * np.sum(np.abs(u - v), axis=ax)
