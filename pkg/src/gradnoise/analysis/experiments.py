"""Ensemble experiments: contraction, moments, entropy residuals, fractional
regularity, stability in the nonlinearity, continuity at ``t = 0``.

Every experiment returns a plain dict (JSON-ready: lists, floats, bools) with
``experiment``, ``params``, ``metrics`` and a ``passed`` flag.
"""

from __future__ import annotations

import logging
import math
from dataclasses import replace

import numpy as np

from ..nonlinearity import r_lambda, regularize
from ..noise import refine, sample_path
from ..solver import SolverConfig, grid_coords, run_batch, run_ensemble, truncate_initial
from .entropy import EntropyObserver, EntropyPair, QuadraticEntropy, TestFunction
from .stats import EnsembleStats, fsum_mean, l1_distance

__all__ = [
    "contraction_experiment",
    "moment_check",
    "moment_uniformity",
    "entropy_deterministic_check",
    "entropy_refinement_study",
    "frac_regularity_check",
    "phi_stability_experiment",
    "phi_stability_trend",
    "initial_time_continuity",
    "jsonable",
]

log = logging.getLogger(__name__)

MAX_EXCLUDED = 0.05


def jsonable(obj):
    """Recursively turn numpy scalars/arrays into plain Python values."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _trapezoid(values: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Time integral over the leading axis."""
    dt = np.diff(times).reshape((-1,) + (1,) * (values.ndim - 1))
    return np.sum(0.5 * (values[1:] + values[:-1]) * dt, axis=0)


def _base_params(cfg: SolverConfig) -> dict:
    return {
        "nonlinearity": cfg.nonlinearity.name,
        "n": cfg.n,
        "M": cfg.M,
        "dim": cfg.dim,
        "dt": cfg.dt,
        "T_final": cfg.T_final,
        "modes": cfg.evaluator.modes,
    }


# ---------------------------------------------------------------------------
# L1 contraction
# ---------------------------------------------------------------------------


def contraction_experiment(xi_a, xi_b, cfg: SolverConfig, seeds, snapshot_times=None, jobs: int = 1,
                           C_max: float = 5.0, chunk: int = 64) -> dict:
    """``t -> E||u(t) - v(t)||_1 / ||xi_a - xi_b||_1`` for pairs driven by the same noise.

    Two exponential constants are fitted to the upper CI of the ratio: the
    least-squares slope of ``log ratio`` against ``t`` through the origin, and
    the smallest ``C >= 0`` with ``sup_t ratio <= exp(C T)``.  The run passes
    when both are at most ``C_max``, the lower CI never exceeds
    ``exp(C_max t)`` and at most 5% of the seeds were excluded.
    """
    seeds = list(seeds)
    if snapshot_times is None:
        snapshot_times = np.linspace(0.0, cfg.T_final, 11)
    xa = np.asarray(getattr(xi_a, "values", xi_a), dtype=float)
    xb = np.asarray(getattr(xi_b, "values", xi_b), dtype=float)
    (ta, tb), _ = run_ensemble(np.stack([xa, xb]), cfg, seeds, snapshot_times, jobs=jobs, chunk=chunk)
    failed = (ta.failed >= 0) | (tb.failed >= 0)
    keep = ~failed
    excluded = int(failed.sum())
    times = ta.times
    dist = l1_distance(ta.snapshots[:, keep], tb.snapshots[:, keep], cfg.h, cfg.dim)  # (n_snap, S)
    d0 = float(l1_distance(truncate_initial(xa, cfg.n), truncate_initial(xb, cfg.n), cfg.h, cfg.dim))
    st = EnsembleStats.from_samples(dist.T)
    if d0 == 0.0:
        ratio, up, lo = (np.zeros_like(st.mean) for _ in range(3))
    else:
        ratio, up, lo = st.mean / d0, st.upper / d0, st.lower / d0
    pos = times > 0
    if d0 == 0.0 or not np.any(pos):
        C_ls = C_sup = 0.0
    else:
        y = np.log(np.maximum(up[pos], 1e-300))
        t = times[pos]
        C_ls = float(np.sum(t * y) / np.sum(t * t))
        C_sup = max(0.0, float(np.log(max(up.max(), 1e-300)) / cfg.T_final)) if cfg.T_final > 0 else 0.0
    C_hat = max(C_ls, C_sup)
    blowup = bool(np.any(lo > np.exp(C_max * times) * (1 + 1e-12)))
    frac = excluded / max(len(seeds), 1)
    passed = C_hat <= C_max and not blowup and frac <= MAX_EXCLUDED
    return jsonable(
        {
            "experiment": "contraction",
            "params": {**_base_params(cfg), "seeds": len(seeds), "C_max": C_max},
            "metrics": {
                "times": times,
                "initial_distance": d0,
                "distance_mean": st.mean,
                "distance_half_width": st.half_width,
                "ratio_mean": ratio,
                "ratio_upper": up,
                "ratio_lower": lo,
                "sup_ratio_upper": float(up.max()) if up.size else 0.0,
                "C_ls": C_ls,
                "C_sup": C_sup,
                "C_hat": C_hat,
                "blowup": blowup,
                "excluded": excluded,
                "excluded_fraction": frac,
            },
            "passed": passed,
        }
    )


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


def moment_check(trajs, m: float, p: float = 2.0) -> dict:
    """Moment ratios of a batched trajectory recorded with ``track_gradients``.

    ``ratio_l2 = (E sup||u||_2^p + E||grad [a_n](u)||_{L2(Q_T)}^p) / (1 + E||xi_n||_2^p)``
    ``ratio_lm = (E sup||u||_{m+1}^{m+1} + E||grad Phi_n(u)||_{L2(Q_T)}^2) / (1 + E||xi_n||_{m+1}^{m+1})``
    """
    if not isinstance(trajs, (list, tuple)):
        trajs = [trajs]
    tot = {}
    for tr in trajs:
        if "grad_a_l2sq" not in tr.totals:
            raise ValueError("trajectory was run without track_gradients")
        keep = np.atleast_1d(tr.failed) < 0
        for k, v in tr.totals.items():
            tot.setdefault(k, []).append(np.atleast_1d(v)[keep])
    tot = {k: np.concatenate(v) for k, v in tot.items()}
    q = p / 2.0
    E = lambda x: float(fsum_mean(x))
    sup_l2 = E(tot["sup_l2sq"] ** q)
    grad_a = E(tot["grad_a_l2sq"] ** q)
    init_l2 = E(tot["init_l2sq"] ** q)
    sup_lm = E(tot["sup_lm1"])
    grad_phi = E(tot["grad_phi_l2sq"])
    init_lm = E(tot["init_lm1"])
    return jsonable(
        {
            "experiment": "moments",
            "params": {"m": m, "p": p, "samples": int(tot["sup_l2sq"].size)},
            "metrics": {
                "E_sup_l2": sup_l2,
                "E_grad_a": grad_a,
                "E_init_l2": init_l2,
                "E_sup_lm": sup_lm,
                "E_grad_phi": grad_phi,
                "E_init_lm": init_lm,
                "ratio_l2": (sup_l2 + grad_a) / (1.0 + init_l2),
                "ratio_lm": (sup_lm + grad_phi) / (1.0 + init_lm),
            },
            "passed": True,
        }
    )


def moment_uniformity(reports: list, factor: float = 2.0) -> dict:
    """Across a refinement matrix every moment ratio must vary by at most ``factor``."""
    out = {}
    ok = True
    for key in ("ratio_l2", "ratio_lm"):
        vals = np.array([r["metrics"][key] for r in reports])
        spread = float(vals.max() / vals.min()) if vals.min() > 0 else (1.0 if vals.max() == 0 else math.inf)
        out[key] = {"values": vals, "max_over_min": spread}
        ok = ok and spread <= factor
    return jsonable({"experiment": "moments", "metrics": out, "factor": factor, "passed": ok})


# ---------------------------------------------------------------------------
# entropy residual
# ---------------------------------------------------------------------------


def entropy_deterministic_check(cfg: SolverConfig, xi, entropy=None, tf: TestFunction | None = None,
                                tol: float = 1e-6, dissipation: str = "face") -> dict:
    """Residual of one noise-free run; passes when ``residual <= tol``."""
    if cfg.evaluator.modes:
        raise ValueError("deterministic check needs modes = 0")
    entropy = QuadraticEntropy() if entropy is None else entropy
    tf = TestFunction(cfg.T_final, dim=cfg.dim) if tf is None else tf
    u0 = np.asarray(getattr(xi, "values", xi), dtype=float)[None]
    obs = EntropyObserver(cfg, entropy, tf, 1, R=float(np.max(np.abs(u0))) + 1.0, dissipation=dissipation)
    obs.set_initial(truncate_initial(u0, cfg.n), u0)
    run_batch(u0, cfg, [sample_path(0, 0, cfg.dt, max(cfg.steps, 1))], observers=[obs])
    r = obs.result()
    res = float(r["residual"][0])
    return jsonable(
        {
            "experiment": "entropy-deterministic",
            "params": {**_base_params(cfg), "entropy": type(entropy).__name__, "tol": tol},
            "metrics": {"residual": res, **{k: float(r[k][0]) for k in ("lhs", "drift", "T1", "T2", "T3", "T4", "T5")}},
            "passed": res <= tol,
        }
    )


def entropy_refinement_study(nonlinearity, coeffs, xi_func, M0: int, dt0: float, delta0: float, shift: float,
                             T: float, seeds, levels: int = 3, dim: int = 1, shrink: float = 2.0,
                             dissipation: str = "face") -> dict:
    """Ensemble-mean entropy residual under simultaneous refinement.

    Level ``l`` uses ``h = h0 / 2^l``, ``dt = dt0 / 4^l`` (so ``dt^{1/2}``
    halves too), ``delta = delta0 / 2^l`` and bridge-refined noise, so every
    level sees the same Brownian paths.  The mean is estimated with the
    centred quadratic variation of the noise update removed (a zero-mean
    martingale), which leaves the expectation unchanged.

    ``B_l = |mean_l| + half_width_l`` bounds ``|E residual|`` at 95%.  The
    envelope ``tau = C (h + dt^{1/2} + delta)`` is calibrated on level 0;
    the study passes when ``B_l <= tau_l`` on every level and
    ``B_{l+1} <= B_l / shrink``.
    """
    seeds = list(seeds)
    S = len(seeds)
    rows = []
    paths = None
    steps0 = int(round(T / dt0))
    for lev in range(levels):
        M = M0 * 2**lev
        dt = dt0 / 4**lev
        delta = delta0 / 2**lev
        cfg = SolverConfig(nonlinearity, coeffs, dt, T, M, dim=dim)
        x = grid_coords(M, dim)
        u0 = np.broadcast_to(np.asarray(xi_func(*x), dtype=float), (S,) + (M,) * dim)
        modes = cfg.evaluator.modes
        if paths is None:
            paths = [sample_path(s, modes, dt0, steps0) for s in seeds]
        else:
            paths = [refine(refine(p)) for p in paths]
        ent = EntropyPair(delta, shift)
        obs = EntropyObserver(cfg, ent, TestFunction(T, dim=dim), S, R=float(np.max(np.abs(u0))) + 1.0,
                              dissipation=dissipation)
        traj = run_batch(u0, cfg, paths, observers=[obs], on_blowup="mask")
        keep = traj.failed < 0
        r = obs.result()
        cv = EnsembleStats.from_samples(r["residual_cv"][keep])
        raw = EnsembleStats.from_samples(r["residual"][keep])
        rows.append(
            {
                "level": lev,
                "M": M,
                "dt": dt,
                "delta": delta,
                "scale": 1.0 / M + math.sqrt(dt) + delta,
                "mean": float(cv.mean),
                "half_width": float(cv.half_width),
                "bound": abs(float(cv.mean)) + float(cv.half_width),
                "raw_mean": float(raw.mean),
                "raw_half_width": float(raw.half_width),
                "excluded": int((~keep).sum()),
            }
        )
    C = rows[0]["bound"] / rows[0]["scale"]
    for row in rows:
        row["tau"] = C * row["scale"]
        row["within_envelope"] = row["bound"] <= row["tau"] * (1 + 1e-12)
    ratios = [rows[i]["bound"] / rows[i + 1]["bound"] if rows[i + 1]["bound"] > 0 else math.inf
              for i in range(len(rows) - 1)]
    passed = all(r["within_envelope"] for r in rows) and all(q >= shrink for q in ratios)
    return jsonable(
        {
            "experiment": "entropy-refinement",
            "params": {
                "nonlinearity": nonlinearity.name,
                "M0": M0,
                "dt0": dt0,
                "delta0": delta0,
                "shift": shift,
                "T_final": T,
                "seeds": S,
                "levels": levels,
                "dissipation": dissipation,
            },
            "metrics": {"levels": rows, "C": C, "shrink_ratios": ratios, "calibrated": True},
            "passed": passed,
        }
    )


# ---------------------------------------------------------------------------
# fractional regularity
# ---------------------------------------------------------------------------


def _box_lhs(snaps: np.ndarray, radius: int, dim: int) -> np.ndarray:
    """``int_x sum_j w_j |u(x) - u(x + j h)|`` with uniform weights over ``|j|_inf <= radius``."""
    ax = tuple(range(snaps.ndim - dim, snaps.ndim))
    total = 0.0
    count = 0
    shifts = range(-radius, radius + 1)
    grids = np.meshgrid(*([shifts] * dim), indexing="ij")
    M = snaps.shape[-1]
    for js in zip(*(g.ravel() for g in grids)):
        shifted = np.roll(snaps, tuple(int(j) for j in js), axis=ax)
        total = total + np.sum(np.abs(snaps - shifted), axis=ax)
        count += 1
    return total / count / M**dim


def frac_regularity_check(traj, m: float, epsilons, slack: float = 0.15) -> dict:
    """``E int_t int_{x,y} |u(t,x) - u(t,y)| rho_eps(x - y)`` against ``eps^{2/(m+1)}``.

    ``rho_eps`` is the normalised box kernel of radius ``eps`` realised on the
    grid (all shifts ``|j| h <= eps``).  The log-log slope over ``epsilons``
    must be at least ``2/(m+1) - slack``.
    """
    h = traj.h
    eps = np.asarray(epsilons, dtype=float)
    if np.any(eps < 2 * h - 1e-12):
        raise ValueError(f"epsilon below 2h = {2 * h:g} is not resolved by the grid")
    snaps = traj.snapshots if traj.batched else traj.snapshots[:, None]
    keep = np.atleast_1d(traj.failed) < 0
    snaps = snaps[:, keep]
    lhs = []
    for e in eps:
        radius = int(math.floor(e / h + 1e-9))
        per_t = _box_lhs(snaps, radius, traj.dim)  # (n_snap, S)
        lhs.append(float(fsum_mean(_trapezoid(per_t, traj.times))))
    lhs = np.array(lhs)
    alpha = 2.0 / (m + 1.0)
    if np.all(lhs > 0):
        slope = float(np.polyfit(np.log(eps), np.log(lhs), 1)[0])
    else:
        slope = math.inf
    grad = float(fsum_mean(traj.totals["grad_a_l1"][keep])) if "grad_a_l1" in traj.totals else None
    N_hat = float(np.max(lhs / (eps**alpha * (1.0 + (grad or 0.0)))))
    return jsonable(
        {
            "experiment": "fracreg",
            "params": {"m": m, "epsilons": eps, "M": traj.M, "slack": slack},
            "metrics": {"lhs": lhs, "slope": slope, "exponent": alpha, "threshold": alpha - slack,
                        "grad_a_l1": grad, "N_hat": N_hat},
            "passed": slope >= alpha - slack,
        }
    )


# ---------------------------------------------------------------------------
# stability in the nonlinearity
# ---------------------------------------------------------------------------


def _stability_runs(regs: dict, cfg: SolverConfig, seeds, x0, snapshot_times, jobs):
    """One ensemble per regularization; shared seeds and ``dt`` couple the noise."""
    n_trunc = min(regs)
    out = {}
    for n, reg in regs.items():
        (tr,), _ = run_ensemble(x0[None], replace(cfg, nonlinearity=reg, n=n_trunc), seeds, snapshot_times, jobs=jobs)
        out[n] = tr
    return out


def _stability_row(fam_name, n, n_prime, ta, tb, reg_n, reg_np, cfg, seeds) -> dict:
    keep = (ta.failed < 0) & (tb.failed < 0)
    dist = l1_distance(ta.snapshots[:, keep], tb.snapshots[:, keep], cfg.h, cfg.dim)
    st = EnsembleStats.from_samples(_trapezoid(dist, ta.times))
    lam = 8.0 / n
    R = r_lambda(reg_n.a_frak, reg_np.a_frak, lam, r_max=4.0 * n_prime)
    excluded = int((~keep).sum())
    return {
        "experiment": "phistab",
        "params": {**_base_params(cfg), "family": fam_name, "n": n, "n_prime": n_prime, "seeds": len(seeds)},
        "metrics": {
            "distance_mean": float(st.mean),
            "distance_half_width": float(st.half_width),
            "lambda": lam,
            "R_lambda": R,
            "R_lambda_ok": R >= n,
            "excluded": excluded,
        },
        "passed": R >= n and excluded <= MAX_EXCLUDED * len(seeds),
    }


def phi_stability_experiment(fam, n: int, n_prime: int, cfg: SolverConfig, seeds, xi, snapshot_times=None,
                             jobs: int = 1) -> dict:
    """``E int_0^T ||u_n - u_{n'}||_1`` for identical data and noise, plus ``R_{8/n}``.

    ``cfg`` supplies coefficients and the time/space grid; its nonlinearity
    is replaced by the two regularizations and both runs truncate the data
    at ``n``.  Runs sharing seeds and ``dt`` see identical increments.
    """
    if n > n_prime:
        raise ValueError("need n <= n_prime")
    seeds = list(seeds)
    if snapshot_times is None:
        snapshot_times = np.linspace(0.0, cfg.T_final, 21)
    regs = {n: regularize(fam, n)}
    regs[n_prime] = regs[n] if n_prime == n else regularize(fam, n_prime)
    x0 = np.asarray(getattr(xi, "values", xi), dtype=float)
    runs = _stability_runs(regs, cfg, seeds, x0, snapshot_times, jobs)
    return jsonable(_stability_row(fam.name, n, n_prime, runs[n], runs[n_prime], regs[n], regs[n_prime], cfg, seeds))


def phi_stability_trend(fam, ns, cfg: SolverConfig, seeds, xi, snapshot_times=None, jobs: int = 1) -> dict:
    """Distances for ``n' = 2n`` over ``ns``; the means must be strictly decreasing
    in ``n`` and ``R_{8/n} >= n`` throughout.  All runs truncate the data at
    ``min(ns)`` so that every pair starts from the same datum."""
    seeds = list(seeds)
    ns = sorted(ns)
    if snapshot_times is None:
        snapshot_times = np.linspace(0.0, cfg.T_final, 21)
    regs = {n: regularize(fam, n) for n in sorted(set(ns) | {2 * n for n in ns})}
    x0 = np.asarray(getattr(xi, "values", xi), dtype=float)
    runs = _stability_runs(regs, cfg, seeds, x0, snapshot_times, jobs)
    rows = [_stability_row(fam.name, n, 2 * n, runs[n], runs[2 * n], regs[n], regs[2 * n], cfg, seeds) for n in ns]
    means = [r["metrics"]["distance_mean"] for r in rows]
    decreasing = all(b < a for a, b in zip(means, means[1:]))
    return jsonable(
        {
            "experiment": "phistab",
            "params": {**_base_params(cfg), "family": fam.name, "ns": ns, "seeds": len(seeds)},
            "metrics": {
                "n": ns,
                "distance_mean": means,
                "distance_half_width": [r["metrics"]["distance_half_width"] for r in rows],
                "R_lambda": [r["metrics"]["R_lambda"] for r in rows],
                "decreasing": decreasing,
            },
            "passed": decreasing and all(r["passed"] for r in rows),
        }
    )


# ---------------------------------------------------------------------------
# continuity at t = 0
# ---------------------------------------------------------------------------


def initial_time_continuity(traj, xi, h_max: float) -> dict:
    """``g(s) = (1/s) E int_0^s ||u(t) - xi||_2^2 dt`` for ``s = h_max, h_max/2, h_max/4``.

    Passes when ``g`` decreases along the sequence and ``g(h_max/4) <= g(h_max)/2``.
    """
    x0 = np.asarray(getattr(xi, "values", xi), dtype=float)
    snaps = traj.snapshots if traj.batched else traj.snapshots[:, None]
    keep = np.atleast_1d(traj.failed) < 0
    snaps = snaps[:, keep]
    vol = traj.h**traj.dim
    ax = tuple(range(2, snaps.ndim))
    err = vol * np.sum((snaps - x0) ** 2, axis=ax)  # (n_snap, S)
    t = traj.times
    hs = [h_max, h_max / 2, h_max / 4]
    g = []
    for s in hs:
        sel = t <= s * (1 + 1e-9)
        if sel.sum() < 2 or abs(t[sel][-1] - s) > 1e-9 * max(s, 1.0):
            raise ValueError(f"need snapshots up to t = {s:g} on [0, {s:g}]")
        g.append(float(fsum_mean(_trapezoid(err[sel], t[sel]))) / s)
    monotone = all(b <= a for a, b in zip(g, g[1:]))
    passed = monotone and g[-1] <= g[0] / 2
    return jsonable(
        {
            "experiment": "initial-continuity",
            "params": {"h": hs, "M": traj.M},
            "metrics": {"g": g, "monotone": monotone, "ratio_quarter": g[-1] / g[0] if g[0] > 0 else 0.0},
            "passed": passed,
        }
    )
