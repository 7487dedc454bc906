"""Explicit Euler-Maruyama finite-volume scheme on the periodic unit grid.

The state is batched: ``u`` has shape ``(S, *grid)`` with ``grid = (M,)*d``,
one row per sample path.  Every right-hand-side term is written as a
difference of face fluxes, so the discrete mass is conserved to rounding.
"""

from __future__ import annotations

import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .noise import BLOCK, NoisePath, sample_path

__all__ = [
    "BlowUpError",
    "CFLError",
    "GridFunction",
    "SolverConfig",
    "Trajectory",
    "grid_coords",
    "cfl_dt",
    "truncate_initial",
    "step",
    "run",
    "run_batch",
    "run_coupled",
    "run_ensemble",
    "write_csv",
    "write_binary",
    "read_binary",
]

log = logging.getLogger(__name__)

BLOWUP_LIMIT = 1e6


class BlowUpError(FloatingPointError):
    def __init__(self, step: int, max_abs: float, sample: int = 0):
        self.step, self.max_abs, self.sample = step, max_abs, sample
        super().__init__(f"blow-up at step {step} (sample {sample}): max|u| = {max_abs:.6g}")


class CFLError(ValueError):
    pass


def grid_coords(M: int, dim: int = 1) -> tuple:
    """Cell coordinates ``x_j = j/M`` as a tuple of ``dim`` arrays of shape ``(M,)*dim``."""
    x = np.arange(M) / M
    if dim == 1:
        return (x,)
    return tuple(np.meshgrid(*([x] * dim), indexing="ij"))


@dataclass(frozen=True)
class GridFunction:
    """Values on the uniform periodic grid of ``T^d`` with ``M`` cells per axis."""

    dim: int
    M: int
    values: np.ndarray

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("only d = 1, 2 are supported")
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.M,) * self.dim:
            raise ValueError(f"values of shape {vals.shape} do not match M={self.M}, d={self.dim}")
        object.__setattr__(self, "values", vals)

    @property
    def h(self) -> float:
        return 1.0 / self.M

    def coords(self) -> tuple:
        return grid_coords(self.M, self.dim)

    @classmethod
    def from_function(cls, func, M: int, dim: int = 1) -> "GridFunction":
        return cls(dim, M, np.asarray(func(*grid_coords(M, dim)), dtype=float) * np.ones((M,) * dim))


def truncate_initial(xi, n) -> GridFunction | np.ndarray:
    """``xi_n = (-n) v (xi ^ n)``; ``n = inf`` leaves ``xi`` unchanged."""
    if isinstance(xi, GridFunction):
        return GridFunction(xi.dim, xi.M, np.clip(xi.values, -n, n))
    return np.clip(np.asarray(xi, dtype=float), -n, n)


def cfl_dt(nonlinearity, evaluator, M: int, dim: int, R: float, safety: float) -> float:
    """Largest admissible step ``safety h^2 / (2d sup Phi_n' + d^2 sup|a|)`` over ``|r| <= R``."""
    h = 1.0 / M
    denom = 2 * dim * nonlinearity.phi_prime_sup(R) + dim**2 * evaluator.a_sup(R)
    return math.inf if denom == 0 else safety * h * h / denom


@dataclass
class SolverConfig:
    """Discretization of ``Pi(Phi_n, xi_n)``: nonlinearity, coefficients and time grid."""

    nonlinearity: object
    coeffs: object
    dt: float
    T_final: float
    M: int
    dim: int = 1
    cfl_safety: float = 0.9
    n: float | None = None
    diag_every: int = 1
    track_gradients: bool = False
    blowup: float = BLOWUP_LIMIT

    def __post_init__(self):
        if not 0 < self.cfl_safety < 1:
            raise ValueError("cfl_safety must lie in (0, 1)")
        if not self.dt > 0 or self.T_final < 0:
            raise ValueError("need dt > 0 and T_final >= 0")
        if self.coeffs.dim != self.dim:
            raise ValueError("coefficient dimension does not match grid dimension")
        if self.n is None:
            self.n = self.nonlinearity.n
        ratio = self.T_final / self.dt
        if abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
            raise ValueError(f"T_final={self.T_final} is not a multiple of dt={self.dt}")

    @property
    def h(self) -> float:
        return 1.0 / self.M

    @property
    def steps(self) -> int:
        return int(round(self.T_final / self.dt))

    @cached_property
    def evaluator(self):
        return self.coeffs.on_grid(grid_coords(self.M, self.dim))

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("evaluator", None)
        state.pop("_budgets", None)
        return state

    def budget(self, R: float) -> float:
        cache = self.__dict__.setdefault("_budgets", {})
        if R not in cache:
            cache[R] = cfl_dt(self.nonlinearity, self.evaluator, self.M, self.dim, R, self.cfl_safety)
        return cache[R]

    def check_cfl(self, R: float):
        b = self.budget(R)
        if self.dt > b:
            raise CFLError(
                f"dt={self.dt:.3e} exceeds the CFL budget {b:.3e} "
                f"(safety {self.cfl_safety}, M={self.M}, d={self.dim}, |u| <= {R:.4g}); reduce dt"
            )

    @cached_property
    def r_allowed(self) -> float:
        """Largest ``R`` (to 1e-6 relative) for which ``dt`` respects the budget."""
        if self.dt <= self.budget(self.blowup):
            return math.inf
        lo, hi = 0.0, self.blowup
        if self.dt > self.budget(0.0):
            return -1.0
        while hi - lo > 1e-6 * max(hi, 1.0):
            mid = 0.5 * (lo + hi)
            if self.dt <= cfl_dt(self.nonlinearity, self.evaluator, self.M, self.dim, mid, self.cfl_safety):
                lo = mid
            else:
                hi = mid
        return lo


def _flux_update(u: np.ndarray, cfg: SolverConfig, dW: np.ndarray) -> np.ndarray:
    """One explicit step for a batch ``u`` of shape ``(S, *grid)``; ``dW`` is ``(S, K)``."""
    d, h, dt = cfg.dim, cfg.h, cfg.dt
    ev = cfg.evaluator
    phi = cfg.nonlinearity.phi(u)
    sig, a, bf = ev.evaluate(u)
    K = ev.modes
    if K:
        dWb = dW.T.reshape((K, u.shape[0]) + (1,) * d)
    out = u.copy()
    for l in range(d):
        ax = u.ndim - d + l
        up = np.roll(u, -1, ax)
        F = (np.roll(phi, -1, ax) - phi) / h
        a_face = 0.5 * (a[l] + np.roll(a[l], -1, ax + 1))
        F += a_face[l] * (up - u) / h
        for j in range(d):
            if j == l:
                continue
            axj = u.ndim - d + j
            c = (np.roll(u, -1, axj) - np.roll(u, 1, axj)) / (2 * h)
            F += a_face[j] * 0.5 * (c + np.roll(c, -1, ax))
        F += 0.5 * (bf[l] + np.roll(bf[l], -1, ax))
        F *= dt
        if K:
            s_face = 0.5 * (sig[l] + np.roll(sig[l], -1, ax + 1))
            F += np.sum(s_face * dWb, axis=0)
        out += (F - np.roll(F, 1, ax)) / h
    return out


def step(u, cfg: SolverConfig, dW) -> GridFunction | np.ndarray:
    """Advance one grid function (or a batch ``(S, *grid)``) by one time step."""
    single = isinstance(u, GridFunction)
    arr = u.values if single else np.asarray(u, dtype=float)
    batch = arr.ndim == cfg.dim
    if batch:
        arr = arr[None]
    dW = np.asarray(dW, dtype=float).reshape(arr.shape[0], -1) if cfg.evaluator.modes else np.zeros((arr.shape[0], 0))
    cfg.check_cfl(float(np.max(np.abs(arr))))
    new = _flux_update(arr, cfg, dW)
    m = float(np.max(np.abs(new))) if np.all(np.isfinite(new)) else math.inf
    if not m <= cfg.blowup:
        raise BlowUpError(0, m)
    if batch:
        new = new[0]
    return GridFunction(cfg.dim, cfg.M, new) if single else new


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Snapshots and scalar diagnostics of a batch of ``S`` paths (or of one path).

    ``snapshots`` has shape ``(n_snap, S, *grid)`` for batches and
    ``(n_snap, *grid)`` for single runs; each diagnostic has shape
    ``(n_diag, S)`` resp. ``(n_diag,)``.  ``totals`` hold running sups and
    time integrals accumulated at every step; ``failed`` records, per sample,
    the step at which it was excluded (``-1`` if never).
    """

    dim: int
    M: int
    times: np.ndarray
    snapshots: np.ndarray
    diag_times: np.ndarray
    diagnostics: dict
    totals: dict
    failed: np.ndarray
    dt: float
    batched: bool = True
    snapshot_steps: np.ndarray = field(default=None)

    @property
    def h(self) -> float:
        return 1.0 / self.M

    @property
    def size(self) -> int:
        return self.snapshots.shape[1] if self.batched else 1

    def grid_functions(self, sample: int | None = None) -> list:
        snaps = self.snapshots[:, sample] if self.batched else self.snapshots
        return [GridFunction(self.dim, self.M, s) for s in snaps]

    def sample(self, s: int) -> "Trajectory":
        if not self.batched:
            return self
        return Trajectory(
            self.dim,
            self.M,
            self.times,
            self.snapshots[:, s],
            self.diag_times,
            {k: v[:, s] for k, v in self.diagnostics.items()},
            {k: v[s] for k, v in self.totals.items()},
            self.failed[s : s + 1],
            self.dt,
            False,
            self.snapshot_steps,
        )

    def select(self, idx) -> "Trajectory":
        idx = np.asarray(idx)
        return Trajectory(
            self.dim,
            self.M,
            self.times,
            self.snapshots[:, idx],
            self.diag_times,
            {k: v[:, idx] for k, v in self.diagnostics.items()},
            {k: v[idx] for k, v in self.totals.items()},
            self.failed[idx],
            self.dt,
            True,
            self.snapshot_steps,
        )

    @property
    def dense(self) -> bool:
        st = self.snapshot_steps
        return st is not None and st.size >= 2 and bool(np.all(np.diff(st) == 1)) and st[0] == 0

    @staticmethod
    def concat(parts: list) -> "Trajectory":
        p0 = parts[0]
        return Trajectory(
            p0.dim,
            p0.M,
            p0.times,
            np.concatenate([p.snapshots for p in parts], axis=1),
            p0.diag_times,
            {k: np.concatenate([p.diagnostics[k] for p in parts], axis=1) for k in p0.diagnostics},
            {k: np.concatenate([p.totals[k] for p in parts]) for k in p0.totals},
            np.concatenate([p.failed for p in parts]),
            p0.dt,
            True,
            p0.snapshot_steps,
        )


def _schedule(times, dt: float, steps: int) -> np.ndarray:
    if times is None:
        return np.unique([0, steps])
    out = []
    for t in np.atleast_1d(np.asarray(times, dtype=float)):
        s = t / dt
        if abs(s - round(s)) > 1e-6 * max(1.0, s):
            raise ValueError(f"snapshot time {t} is not on the time grid")
        s = int(round(s))
        if not 0 <= s <= steps:
            raise ValueError(f"snapshot time {t} outside [0, T_final]")
        out.append(s)
    return np.unique([0] + out)


def _norms(u: np.ndarray, cfg: SolverConfig) -> dict:
    ax = tuple(range(1, u.ndim))
    vol = cfg.h**cfg.dim
    au = np.abs(u)
    m1 = cfg.nonlinearity.m + 1
    return {
        "mass": vol * np.sum(u, axis=ax),
        "l1": vol * np.sum(au, axis=ax),
        "l2sq": vol * np.sum(u * u, axis=ax),
        "lm1": vol * np.sum(au**m1, axis=ax),
    }


def _gradients(u: np.ndarray, cfg: SolverConfig) -> tuple:
    """Per-sample ``||grad_h [a_n](u)||_2^2``, ``||grad_h [a_n](u)||_1`` and ``||grad_h Phi_n(u)||_2^2``."""
    d, h = cfg.dim, cfg.h
    ax = tuple(range(1, u.ndim))
    A = cfg.nonlinearity.bracket_a(u)
    P = cfg.nonlinearity.phi(u)
    sq_a = 0.0
    sq_p = 0.0
    for l in range(d):
        a_ = u.ndim - d + l
        sq_a = sq_a + ((np.roll(A, -1, a_) - A) / h) ** 2
        sq_p = sq_p + ((np.roll(P, -1, a_) - P) / h) ** 2
    vol = h**d
    return vol * np.sum(sq_a, axis=ax), vol * np.sum(np.sqrt(sq_a), axis=ax), vol * np.sum(sq_p, axis=ax)


class _NoiseFeed:
    """Block-wise increments ``(B, S, K)`` for a list of paths (shared paths fetched once)."""

    def __init__(self, paths, modes: int):
        self.paths = list(paths)
        self.modes = modes

    def block(self, start: int, stop: int) -> np.ndarray:
        cache = {}
        cols = []
        for p in self.paths:
            key = id(p)
            if key not in cache:
                cache[key] = p.block(start, stop) if self.modes else np.zeros((stop - start, 0))
            cols.append(cache[key])
        return np.stack(cols, axis=1)


def run_batch(
    u0,
    cfg: SolverConfig,
    paths,
    snapshot_times=None,
    observers=(),
    on_blowup: str = "raise",
) -> Trajectory:
    """Integrate a batch of initial data, sample ``s`` driven by ``paths[s]``.

    ``on_blowup="mask"`` freezes and flags failing samples (non-finite values,
    ``max|u|`` above the blow-up limit, or leaving the CFL-admissible range)
    instead of raising.
    """
    u = truncate_initial(np.asarray(u0, dtype=float), cfg.n)
    if u.ndim != cfg.dim + 1:
        raise ValueError("u0 must have shape (S, *grid)")
    S = u.shape[0]
    if len(paths) != S:
        raise ValueError("need one noise path per sample")
    steps = cfg.steps
    modes = cfg.evaluator.modes
    for p in paths:
        if p.modes != modes:
            raise ValueError(f"noise path has {p.modes} modes, coefficients have {modes}")
        if steps and (abs(p.dt - cfg.dt) > 1e-12 * cfg.dt or p.steps < steps):
            raise ValueError("noise path does not cover [0, T_final] at the configured dt")
    cfg.check_cfl(float(np.max(np.abs(u))))
    r_ok = cfg.r_allowed

    snap_steps = _schedule(snapshot_times, cfg.dt, steps)
    snaps = np.empty((snap_steps.size,) + u.shape)
    diag_steps = np.unique(np.concatenate([np.arange(0, steps + 1, cfg.diag_every), [steps]]))
    diags = {k: np.empty((diag_steps.size, S)) for k in ("mass", "l1", "l2sq", "lm1")}
    nrm = _norms(u, cfg)
    totals = {"sup_l2sq": nrm["l2sq"].copy(), "sup_lm1": nrm["lm1"].copy(), "init_l2sq": nrm["l2sq"].copy(),
              "init_lm1": nrm["lm1"].copy()}
    if cfg.track_gradients:
        totals.update(grad_a_l2sq=np.zeros(S), grad_a_l1=np.zeros(S), grad_phi_l2sq=np.zeros(S))
    failed = np.full(S, -1)

    si = di = 0
    if snap_steps[0] == 0:
        snaps[0] = u
        si = 1
    for k in diags:
        diags[k][0] = nrm[k]
    di = 1

    feed = _NoiseFeed(paths, modes)
    for b0 in range(0, steps, BLOCK):
        b1 = min(b0 + BLOCK, steps)
        dWb = feed.block(b0, b1)
        for n in range(b0, b1):
            dW = dWb[n - b0]
            if cfg.track_gradients:
                g2, g1, p2 = _gradients(u, cfg)
                totals["grad_a_l2sq"] += cfg.dt * g2
                totals["grad_a_l1"] += cfg.dt * g1
                totals["grad_phi_l2sq"] += cfg.dt * p2
            with np.errstate(over="ignore", invalid="ignore"):
                new = _flux_update(u, cfg, dW)
                ax = tuple(range(1, u.ndim))
                mx = np.max(np.abs(new), axis=ax)
            mx = np.where(np.isfinite(mx), mx, np.inf)
            bad = (mx > cfg.blowup) | (mx > r_ok)
            if failed.max() >= 0 or bad.any():
                newbad = bad & (failed < 0)
                if newbad.any():
                    s = int(np.argmax(newbad))
                    if on_blowup == "raise":
                        if mx[s] > cfg.blowup:
                            raise BlowUpError(n + 1, float(mx[s]), s)
                        raise CFLError(
                            f"step {n + 1} (sample {s}): max|u| = {mx[s]:.6g} leaves the range "
                            f"|u| <= {r_ok:.6g} admitted by dt={cfg.dt:.3e}; reduce dt"
                        )
                    failed[newbad] = n + 1
                    log.warning("excluding %d sample(s) at step %d", int(newbad.sum()), n + 1)
                frozen = failed >= 0
                new[frozen] = u[frozen]
            for obs in observers:
                obs.update(n, n * cfg.dt, u, new, dW)
            u = new
            nrm = None
            if si < snap_steps.size and snap_steps[si] == n + 1:
                snaps[si] = u
                si += 1
            nrm = _norms(u, cfg)
            totals["sup_l2sq"] = np.maximum(totals["sup_l2sq"], nrm["l2sq"])
            totals["sup_lm1"] = np.maximum(totals["sup_lm1"], nrm["lm1"])
            if di < diag_steps.size and diag_steps[di] == n + 1:
                for k in diags:
                    diags[k][di] = nrm[k]
                di += 1
    for obs in observers:
        fin = getattr(obs, "finish", None)
        if fin is not None:
            fin(steps, steps * cfg.dt, u)
    return Trajectory(
        cfg.dim,
        cfg.M,
        snap_steps * cfg.dt,
        snaps,
        diag_steps * cfg.dt,
        diags,
        totals,
        failed,
        cfg.dt,
        True,
        snap_steps,
    )


def _values(xi) -> np.ndarray:
    return xi.values if isinstance(xi, GridFunction) else np.asarray(xi, dtype=float)


def run(xi, cfg: SolverConfig, path: NoisePath, snapshot_times=None, observers=()) -> Trajectory:
    """Single trajectory of ``Pi(Phi_n, xi_n)`` driven by ``path``."""
    traj = run_batch(_values(xi)[None], cfg, [path], snapshot_times, observers)
    return traj.sample(0)


def run_coupled(xi_a, xi_b, cfg: SolverConfig, path: NoisePath, snapshot_times=None) -> tuple:
    """Two trajectories driven by the same increments."""
    u0 = np.stack([_values(xi_a), _values(xi_b)])
    traj = run_batch(u0, cfg, [path, path], snapshot_times)
    return traj.sample(0), traj.sample(1)


def _ensemble_chunk(args):
    u0, cfg, seeds, snapshot_times, observer_factory, on_blowup = args
    paths = [sample_path(s, cfg.evaluator.modes, cfg.dt, max(cfg.steps, 1)) for s in seeds]
    reps = u0.shape[0]
    batch = np.concatenate([np.broadcast_to(u0[j], (len(seeds),) + u0.shape[1:]) for j in range(reps)])
    observers = [] if observer_factory is None else [observer_factory(cfg, batch.shape[0], paths * reps)]
    traj = run_batch(batch, cfg, paths * reps, snapshot_times, observers, on_blowup)
    return traj, [o.result() for o in observers]


def run_ensemble(
    initial,
    cfg: SolverConfig,
    seeds,
    snapshot_times=None,
    jobs: int = 1,
    chunk: int = 64,
    observer_factory=None,
    on_blowup: str = "mask",
):
    """Run every seed for each initial datum in ``initial`` (shape ``(R, *grid)``).

    Returns ``(trajectories, observer_results)``: one batched
    :class:`Trajectory` per initial datum (samples in seed order) and the
    list of per-chunk observer results.  Seeds are cut into fixed chunks
    whose content does not depend on ``jobs``, so results are identical for
    any worker count.
    """
    u0 = np.asarray(initial, dtype=float)
    if u0.ndim == cfg.dim:
        u0 = u0[None]
    seeds = [int(s) for s in seeds]
    tasks = [
        (u0, cfg, seeds[i : i + chunk], snapshot_times, observer_factory, on_blowup)
        for i in range(0, len(seeds), chunk)
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ensemble_chunk, tasks))
    else:
        results = [_ensemble_chunk(t) for t in tasks]
    reps = u0.shape[0]
    trajs = []
    for j in range(reps):
        parts = []
        for (traj, _), task in zip(results, tasks):
            c = len(task[2])
            parts.append(traj.select(np.arange(j * c, (j + 1) * c)))
        trajs.append(Trajectory.concat(parts))
    return trajs, [r for _, obs in results for r in obs]


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def write_csv(traj: Trajectory, path, sample: int = 0):
    """One row per cell per snapshot: ``t, x[, y], u``."""
    tr = traj.sample(sample) if traj.batched else traj
    coords = grid_coords(tr.M, tr.dim)
    cols = [c.ravel() for c in coords]
    header = "t,x,u" if tr.dim == 1 else "t,x,y,u"
    rows = []
    for t, snap in zip(tr.times, tr.snapshots):
        rows.append(np.column_stack([np.full(cols[0].size, t)] + cols + [snap.ravel()]))
    np.savetxt(path, np.vstack(rows), delimiter=",", header=header, comments="", fmt="%.17g")


def write_binary(traj: Trajectory, path, sample: int = 0):
    """Header ``<III`` (dims, M, count), then ``count`` times, then the snapshots (C order), all little-endian float64."""
    tr = traj.sample(sample) if traj.batched else traj
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", tr.dim, tr.M, tr.times.size))
        fh.write(np.asarray(tr.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(tr.snapshots, dtype="<f8").tobytes())


def read_binary(path) -> tuple:
    """Inverse of :func:`write_binary`: ``(times, snapshots)``."""
    with open(path, "rb") as fh:
        dim, M, count = struct.unpack("<III", fh.read(12))
        times = np.frombuffer(fh.read(8 * count), dtype="<f8")
        vals = np.frombuffer(fh.read(), dtype="<f8").reshape((count,) + (M,) * dim)
    return times.copy(), vals.copy()
