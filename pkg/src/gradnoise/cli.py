"""Command line entry point: ``run``, ``check-assumptions`` and ``plot``.

``run`` executes the experiments listed in a TOML config, writes one JSON
report per experiment (sorted keys, no timings), optional SVG figures and
trajectory dumps, and a ``manifest.json`` with the SHA-256 of every file.
A tab-separated summary line per experiment goes to standard output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as an
from .coefficients import check_assumption_sigma
from .config import ConfigError, RunConfig, initial_function, load_config
from .mcf import McfConfig, curvature_consistency, reconstruct_curve, run_mcf_u
from .noise import sample_path
from .nonlinearity import check_assumption_A
from .solver import CFLError, grid_coords, run_batch, run_ensemble, truncate_initial, write_binary, write_csv

__all__ = ["main", "run_experiments", "EXIT_FAIL", "EXIT_CONFIG"]

log = logging.getLogger("gradnoise")

EXIT_FAIL = 1
EXIT_CONFIG = 2
ENV_OUT = "GRADNOISE_OUT"


def _dump(obj) -> str:
    return json.dumps(an.jsonable(obj), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def _grid_times(sc, count: int) -> np.ndarray:
    """``count`` snapshot times spread over ``[0, T_final]`` on the step grid."""
    return np.unique(np.round(np.linspace(0, sc.steps, count))) * sc.dt


def _m(cfg: RunConfig) -> float:
    return float(cfg["nonlinearity"]["m"]) if cfg["nonlinearity"]["family"] == "power_law" else 1.0


def _exp_contraction(cfg: RunConfig, jobs: int) -> dict:
    p = cfg.exp("contraction")
    xa = cfg.xi()
    xb = cfg.xi(cfg["initial"]["xi_alt"])
    sc = cfg.solver_config(xi=np.maximum(np.abs(xa), np.abs(xb)))
    return an.contraction_experiment(xa, xb, sc, cfg.seeds(), _grid_times(sc, p["snapshots"]), jobs=jobs,
                                     C_max=float(p["C_max"]), chunk=cfg["ensemble"]["chunk"])


def _exp_moments(cfg: RunConfig, jobs: int) -> dict:
    p = cfg.exp("moments")
    seeds = cfg.seeds(p["count"])
    reports = []
    for n in p["ns"]:
        for M in p["Ms"]:
            sc = cfg.solver_config(n=n, M=M, T=float(p["T_final"]))
            sc.track_gradients = True
            (tr,), _ = run_ensemble(cfg.xi(M=M)[None], sc, seeds, jobs=jobs, chunk=cfg["ensemble"]["chunk"])
            rep = an.moment_check(tr, _m(cfg), float(p["p"]))
            rep["params"].update(n=n, M=M, dt=sc.dt)
            reports.append(rep)
    out = an.moment_uniformity(reports, float(p["factor"]))
    out["params"] = {"ns": p["ns"], "Ms": p["Ms"], "seeds": len(seeds), "T_final": p["T_final"]}
    out["runs"] = reports
    return out


def _exp_entropy(cfg: RunConfig, jobs: int) -> dict:
    p = cfg.exp("entropy")
    dim = cfg["grid"]["dim"]
    det_xi = cfg.xi(p["det_xi"], M=p["det_M"])
    det_cfg = cfg.solver_config(M=p["det_M"], T=float(p["det_T"]), modes=0, dt=float(p["det_dt"]), xi=det_xi,
                                family=p["det_family"])
    det = an.entropy_deterministic_check(det_cfg, det_xi, tol=float(p["tol"]))
    T, L = float(p["T_final"]), p["levels"]
    base = cfg.solver_config(M=p["M0"], T=T)
    # level l runs at dt0 / 4^l; the finest level has the binding CFL budget
    fine = cfg.solver_config(M=p["M0"] * 2 ** (L - 1), T=T)
    dt0 = T / math.ceil(T / (4 ** (L - 1) * fine.dt))
    expr = cfg["initial"]["xi"]
    study = an.entropy_refinement_study(
        base.nonlinearity, base.coeffs, lambda *xs: initial_function(expr, xs[0].shape[0], dim),
        p["M0"], dt0, float(p["delta0"]), float(p["shift"]), T, cfg.seeds(p["count"]),
        levels=L, dim=dim, shrink=float(p["shrink"]),
    )
    return {
        "experiment": "entropy",
        "plot": "entropy-refinement",
        "deterministic": det,
        "stochastic": study,
        "params": study["params"],
        "metrics": study["metrics"],
        "passed": bool(det["passed"] and study["passed"]),
    }


def _exp_fracreg(cfg: RunConfig, jobs: int) -> dict:
    p = cfg.exp("fracreg")
    xi = cfg.xi(p["xi"], M=p["M"])
    sc = cfg.solver_config(M=p["M"], T=float(p["T_final"]), modes=None if p["noise"] else 0, xi=xi)
    sc.track_gradients = True
    (tr,), _ = run_ensemble(xi[None], sc, cfg.seeds(p["count"]), _grid_times(sc, p["snapshots"]), jobs=jobs)
    return an.frac_regularity_check(tr, _m(cfg), [k * sc.h for k in p["epsilons_h"]], float(p["slack"]))


def _exp_phistab(cfg: RunConfig, jobs: int) -> dict:
    p = cfg.exp("phistab")
    xi = cfg.xi(p["xi"], M=p["M"])
    # one dt for every n: the CFL budget of the largest regularization
    sc = cfg.solver_config(n=2 * max(p["ns"]), M=p["M"], T=float(p["T_final"]), xi=xi)
    return an.phi_stability_trend(cfg.family(), list(p["ns"]), sc, cfg.seeds(p["count"]), xi,
                                  _grid_times(sc, p["snapshots"]), jobs=jobs)


def _exp_mcf(cfg: RunConfig, jobs: int) -> dict:
    p = cfg.exp("mcf-consistency")
    dt = float(p["dt"])
    rows = []
    for M in p["Ms"]:
        mc = McfConfig([], 0.0, n=float(p["n"]), M=M, dt=dt, T_final=dt)
        tr = run_mcf_u(mc, cfg.xi(p["xi"], M=M), sample_path(0, 0, dt, 1), [0.0, dt])
        rep = curvature_consistency(tr, tol=float(p["tol"]), C_max=float(p["C_max"]))
        rows.append({"M": M, **rep["metrics"], "passed": rep["passed"],
                     "periodicity_defect": float(np.max(reconstruct_curve(tr).defect))})
    res = [r["max_residual"] for r in rows]
    spec = [r["max_spectral_residual"] for r in rows]
    return {
        "experiment": "mcf-consistency",
        "params": {"Ms": p["Ms"], "dt": dt, "n": p["n"], "tol": p["tol"], "C_max": p["C_max"]},
        "metrics": {"residual": res, "spectral_residual": spec,
                    "spectral_ratios": [a / b for a, b in zip(spec, spec[1:])], "runs": rows},
        "passed": all(r["passed"] for r in rows),
    }


def _exp_continuity(cfg: RunConfig, jobs: int) -> dict:
    p = cfg.exp("initial-continuity")
    hm = float(p["h_max"])
    k = p["snapshots"] - 1
    if k % 4:
        raise ValueError("initial-continuity: snapshots - 1 must be divisible by 4")
    steps = math.ceil(cfg.solver_config(T=hm).steps / k) * k
    sc = cfg.solver_config(T=hm, dt=hm / steps)
    xi = cfg.xi()
    (tr,), _ = run_ensemble(xi[None], sc, cfg.seeds(p["count"]), _grid_times(sc, k + 1), jobs=jobs)
    return an.initial_time_continuity(tr, truncate_initial(xi, sc.n), hm)


RUNNERS = {
    "contraction": _exp_contraction,
    "moments": _exp_moments,
    "entropy": _exp_entropy,
    "fracreg": _exp_fracreg,
    "phistab": _exp_phistab,
    "mcf-consistency": _exp_mcf,
    "initial-continuity": _exp_continuity,
}


def _summary(name: str, rep: dict) -> str:
    m = rep.get("metrics", {})
    key = {
        "contraction": "C_hat",
        "fracreg": "slope",
        "phistab": "distance_mean",
        "initial-continuity": "g",
        "mcf-consistency": "residual",
        "entropy": "shrink_ratios",
    }.get(name)
    val = m.get(key) if key else None
    if name == "moments" and "ratio_l2" in m:
        val = [m["ratio_l2"]["max_over_min"], m["ratio_lm"]["max_over_min"]]
    return f"{name}\t{'pass' if rep.get('passed') else 'FAIL'}\t{json.dumps(an.jsonable(val))}"


def _sample_outputs(cfg: RunConfig, out: Path) -> list:
    """CSV / binary dump of one sample trajectory of the base configuration."""
    files = []
    o = cfg["output"]
    if not (o["csv"] or o["binary"]):
        return files
    sc = cfg.solver_config()
    times = np.linspace(0.0, sc.T_final, cfg["time"]["snapshots"])
    times = np.round(times / sc.dt) * sc.dt
    seed = cfg["ensemble"]["seed_base"]
    path = sample_path(seed, sc.evaluator.modes, sc.dt, max(sc.steps, 1))
    tr = run_batch(cfg.xi()[None], sc, [path], times, on_blowup="mask").sample(0)
    if o["csv"]:
        f = out / "trajectory.csv"
        write_csv(tr, f)
        files.append(f)
        if cfg.equation == "mcf":
            curve = reconstruct_curve(tr)
            g = out / "curve.csv"
            rows = [np.column_stack([np.full(curve.x.size, t), curve.x, v]) for t, v in zip(curve.times, curve.heights)]
            np.savetxt(g, np.vstack(rows), delimiter=",", header="t,x,v", comments="", fmt="%.17g")
            files.append(g)
            if o["plots"]:
                from .plots import plot_curves

                svg = out / "curve.svg"
                plot_curves(curve.x, {f"t={t:.4g}": v for t, v in zip(curve.times, curve.heights)}, svg, "x", "v")
                files.append(svg)
    if o["binary"]:
        f = out / "trajectory.bin"
        write_binary(tr, f)
        files.append(f)
    return files


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_experiments(cfg: RunConfig, out: Path, jobs: int = 1, stdout=None, stderr=None) -> int:
    """Run every configured experiment; exit code 0 iff all pass."""
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    failed = []
    for name in cfg.experiments:
        log.info("running %s", name)
        try:
            rep = RUNNERS[name](cfg, jobs)
        except (CFLError, ValueError, FloatingPointError) as exc:
            rep = {"experiment": name, "error": str(exc), "passed": False}
        rep = an.jsonable(rep)
        f = out / f"{name}.json"
        f.write_text(_dump(rep))
        files.append(f)
        if cfg["output"]["plots"] and "error" not in rep:
            from .plots import plot_report

            svg = out / f"{name}.svg"
            kind = rep.get("plot", rep.get("experiment"))
            plot_report({**rep, "experiment": kind}, svg)
            files.append(svg)
        print(_summary(name, rep), file=stdout)
        if not rep.get("passed"):
            failed.append(name)
    files.extend(_sample_outputs(cfg, out))
    manifest = {
        "experiments": cfg.experiments,
        "passed": not failed,
        "files": {p.name: _sha256(p) for p in sorted(files)},
    }
    (out / "manifest.json").write_text(_dump(manifest))
    if failed:
        print("failed experiments: " + ", ".join(failed), file=stderr)
        return EXIT_FAIL
    return 0


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = args.out or os.environ.get(ENV_OUT) or cfg[""]["out_dir"]
    return run_experiments(cfg, Path(out), jobs=args.jobs)


def _cmd_check(args) -> int:
    cfg = load_config(args.config)
    R, G = float(args.range), int(args.grid)
    grid = np.linspace(-R, R, G)
    rep = {}
    if cfg.equation != "mcf":
        rep["assumption_A"] = check_assumption_A(cfg.family(), grid).to_dict()
    co = cfg.coefficients()
    # x on its own axes, r along a trailing one: every (x, r) pair is sampled
    xs = tuple(c[..., None] for c in grid_coords(min(G, 256), cfg["grid"]["dim"]))
    rep["assumption_sigma"] = check_assumption_sigma(co, (xs, grid))
    ok = all(v.get("passed", True) for v in rep.values())
    rep["passed"] = ok
    sys.stdout.write(_dump(rep))
    return 0 if ok else EXIT_FAIL


def _cmd_plot(args) -> int:
    from .plots import plot_report

    with open(args.report) as fh:
        rep = json.load(fh)
    kind = rep.get("plot", rep.get("experiment"))
    plot_report({**rep, "experiment": kind}, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gradnoise", description="Conservative gradient-noise SPDE experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiments of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    r.add_argument("--out", default=None, help=f"output directory (overrides ${ENV_OUT} and the config)")
    r.set_defaults(func=_cmd_run)
    c = sub.add_parser("check-assumptions", help="sampled structural checks of the configured model")
    c.add_argument("--config", required=True)
    c.add_argument("--range", type=float, default=10.0)
    c.add_argument("--grid", type=int, default=2001)
    c.set_defaults(func=_cmd_check)
    p = sub.add_parser("plot", help="render a report as SVG")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
