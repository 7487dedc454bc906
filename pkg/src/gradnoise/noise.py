"""Seeded, counter-based Brownian increments for the truncated noise modes.

Every increment is a pure function of ``(seed, mode, step)`` (and of the
parent step and refinement level for bridge-refined paths), so paths can be
regenerated block by block, in any order, by any worker.  Two solutions are
coupled by handing them the same :class:`NoisePath`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = ["NoisePath", "NoiseSizeError", "sample_path", "refine", "pair_sum"]

# Upper bound on the number of increments a path may materialize at once.
MAX_INCREMENTS = 2**31 - 1
# Steps generated per Philox call; fixed so results never depend on chunking.
BLOCK = 4096

_MASK64 = (1 << 64) - 1
_TAG_BASE = 0
_TAG_BRIDGE = 1


class NoiseSizeError(ValueError):
    """Raised when a path would not fit in an addressable array."""


def _key(seed: int, mode: int, level: int, tag: int) -> np.ndarray:
    if mode >= 1 << 40 or level >= 1 << 16:
        raise NoiseSizeError(f"mode {mode} / level {level} outside key range")
    word = (mode << 20) | (level << 2) | tag
    return np.array([seed & _MASK64, word], dtype=np.uint64)


def _normals(key: np.ndarray, start: int, count: int) -> np.ndarray:
    """Standard normals for counters ``start .. start+count-1`` (one per counter)."""
    if count <= 0:
        return np.empty(0)
    counter = np.array([start, 0, 0, 0], dtype=np.uint64)
    raw = np.random.Philox(key=key, counter=counter).random_raw(4 * count)
    raw = raw.reshape(count, 4)
    u1 = ((raw[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def _quantum(dt0: float) -> float:
    """Common power-of-two grid for every increment derived from a level-0 step ``dt0``.

    All increments are multiples of it and stay far below ``2**53`` times it,
    so bridge splits ``second = total - first`` are exact.
    """
    return 2.0 ** (math.floor(math.log2(math.sqrt(dt0))) - 40)


@dataclass(frozen=True)
class NoisePath:
    """Increments ``dW[step, mode] ~ N(0, dt)`` of ``modes`` independent Wiener processes.

    ``level`` counts Brownian-bridge refinements applied to the level-0 path
    drawn by :func:`sample_path`; ``dt`` and ``steps`` are those of this level.
    """

    seed: int
    modes: int
    dt: float
    steps: int
    level: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.steps < 0 or self.modes < 0:
            raise ValueError("steps and modes must be non-negative")

    @property
    def T(self) -> float:
        return self.dt * self.steps

    def block(self, start: int, stop: int) -> np.ndarray:
        """Increments for steps ``start <= s < stop`` as an array ``[stop-start, modes]``."""
        start = max(start, 0)
        stop = min(stop, self.steps)
        out = np.empty((max(stop - start, 0), self.modes))
        if out.size == 0:
            return out
        for k in range(self.modes):
            out[:, k] = self._mode_block(k, start, stop)
        return out

    def _mode_block(self, k: int, start: int, stop: int) -> np.ndarray:
        if self.level == 0:
            pieces = []
            b0 = (start // BLOCK) * BLOCK
            for b in range(b0, stop, BLOCK):
                z = _normals(_key(self.seed, k, 0, _TAG_BASE), b, BLOCK)
                lo, hi = max(start - b, 0), min(stop - b, BLOCK)
                pieces.append(z[lo:hi])
            q = _quantum(self.dt)
            return np.round(np.concatenate(pieces) * np.sqrt(self.dt) / q) * q
        parent = NoisePath(self.seed, self.modes, 2.0 * self.dt, (self.steps + 1) // 2, self.level - 1)
        p0, p1 = start // 2, (stop + 1) // 2
        coarse = parent._mode_block(k, p0, p1)
        pieces = []
        b0 = (p0 // BLOCK) * BLOCK
        for b in range(b0, p1, BLOCK):
            z = _normals(_key(self.seed, k, self.level, _TAG_BRIDGE), b, BLOCK)
            lo, hi = max(p0 - b, 0), min(p1 - b, BLOCK)
            pieces.append(z[lo:hi])
        z = np.concatenate(pieces)
        # conditional midpoint of the bridge over one coarse step of length 2*dt
        q = _quantum(self.dt * 2**self.level)
        first = np.round((0.5 * coarse + np.sqrt(0.5 * self.dt) * z) / q) * q
        second = coarse - first
        fine = np.empty(2 * coarse.size)
        fine[0::2] = first
        fine[1::2] = second
        off = start - 2 * p0
        return fine[off: off + (stop - start)]

    @cached_property
    def increments(self) -> np.ndarray:
        if self.steps * self.modes > MAX_INCREMENTS:
            raise NoiseSizeError(
                f"{self.steps} steps x {self.modes} modes exceeds {MAX_INCREMENTS} increments"
            )
        out = self.block(0, self.steps)
        out.setflags(write=False)
        return out


def sample_path(seed: int, modes: int, dt: float, steps: int) -> NoisePath:
    """Level-0 path keyed by ``(seed, mode, step)``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps * max(modes, 1) > MAX_INCREMENTS:
        raise NoiseSizeError(f"{steps} steps x {modes} modes exceeds {MAX_INCREMENTS} increments")
    return NoisePath(int(seed), int(modes), float(dt), int(steps))


def refine(path: NoisePath) -> NoisePath:
    """Halve ``dt``: consecutive pairs of the child sum exactly to the parent increments."""
    return NoisePath(path.seed, path.modes, path.dt / 2.0, 2 * path.steps, path.level + 1)


def pair_sum(increments: np.ndarray) -> np.ndarray:
    """Sum consecutive pairs of steps (inverse of :func:`refine` on increments)."""
    return increments[0::2] + increments[1::2]
