"""Uniform-grid lookup tables used in the solver's inner loop."""

from __future__ import annotations

import numpy as np

GAUSS_4 = np.polynomial.legendre.leggauss(4)


class HermiteTable:
    """Piecewise cubic Hermite interpolant of ``F`` on ``start + j*step``.

    ``values`` holds ``F`` and ``slopes`` holds ``F'`` at the nodes.  Inputs
    outside the table are clamped to the end cells (callers extend).
    """

    def __init__(self, start: float, step: float, values, slopes):
        self.start = float(start)
        self.step = float(step)
        self.values = np.asarray(values, dtype=float)
        self.slopes = np.asarray(slopes, dtype=float) * self.step
        self.stop = self.start + self.step * (self.values.size - 1)
        y0, y1 = self.values[:-1], self.values[1:]
        d0, d1 = self.slopes[:-1], self.slopes[1:]
        # per-cell cubic in the local coordinate s in [0, 1], written around y0
        self._c = (
            np.ascontiguousarray(y0),
            np.ascontiguousarray(d0),
            3.0 * (y1 - y0) - 2.0 * d0 - d1,
            2.0 * (y0 - y1) + d0 + d1,
        )
        self._inv = 1.0 / self.step

    def __call__(self, r):
        t = (np.asarray(r, dtype=float) - self.start) * self._inv
        j = np.clip(np.floor(t).astype(np.intp), 0, self.values.size - 2)
        s = t - j
        c0, c1, c2, c3 = self._c
        return np.take(c0, j) + s * (np.take(c1, j) + s * (np.take(c2, j) + s * np.take(c3, j)))


def cumulative_integral(func, nodes: np.ndarray) -> np.ndarray:
    """``int_{nodes[0]}^{nodes[j]} func`` for every node, via 4-point Gauss per cell."""
    x, w = GAUSS_4
    a = nodes[:-1, None]
    b = nodes[1:, None]
    pts = 0.5 * (b - a) * x[None, :] + 0.5 * (a + b)
    vals = func(pts.ravel()).reshape(pts.shape)
    cells = 0.5 * (b[:, 0] - a[:, 0]) * (vals @ w)
    return np.concatenate([[0.0], np.cumsum(cells)])


def bracket_table(func, R: float, step: float) -> HermiteTable:
    """Table of ``[g](r) = int_0^r g`` on ``[-R, R]`` with Hermite slopes ``g``."""
    J = int(np.ceil(R / step))
    pos = np.arange(J + 1) * step
    neg = -pos[::-1]
    right = cumulative_integral(func, pos)
    left = cumulative_integral(func, -pos)[::-1]
    nodes = np.concatenate([neg[:-1], pos])
    vals = np.concatenate([left[:-1], right])
    return HermiteTable(nodes[0], step, vals, func(nodes))
