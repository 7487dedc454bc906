"""Acceptance criteria 1-10, each at its stated tolerance.

The stochastic criteria (5-9) share one run of ``configs/standard.toml``.
Every test records a one-line verdict shown in the terminal summary.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate

from gradnoise.cli import run_experiments
from gradnoise.config import load_config, parse_config
from gradnoise.mcf import McfConfig, mcf_solver_config
from gradnoise.coefficients import TrigField, TrigMode, separable
from gradnoise.noise import sample_path
from gradnoise.nonlinearity import make_linear, make_power_law, mcf_b, mcf_cutoff, mcf_regularize, regularize
from gradnoise.solver import SolverConfig, grid_coords, run_batch

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1]
STANDARD = ROOT / "configs" / "standard.toml"
JOBS = os.cpu_count() or 1


@pytest.fixture(scope="module")
def standard(tmp_path_factory):
    out = tmp_path_factory.mktemp("standard")
    t0 = time.perf_counter()
    code = run_experiments(load_config(STANDARD), out, jobs=JOBS)
    elapsed = time.perf_counter() - t0
    reports = {p.stem: json.loads(p.read_text()) for p in out.glob("*.json") if p.stem != "manifest"}
    return {"code": code, "reports": reports, "elapsed": elapsed, "out": out}


# -- 1: mass conservation ---------------------------------------------------


def _mass_cases():
    M = 256
    noise = separable(0.2, profile="sqrt")
    x, = grid_coords(M)
    xi = 1 + 0.5 * np.sin(2 * np.pi * x)
    for m in (2, 3):
        nl = regularize(make_power_law(m), 4)
        probe = SolverConfig(nl, noise, 1.0, 0.0, M)
        dt = 0.01 / math.ceil(0.01 / probe.budget(3.0))
        yield f"pme m={m}", SolverConfig(nl, noise, dt, 0.01, M), xi
    mc = McfConfig([TrigField((TrigMode(0.2, (1.0,)),))], 50.0, n=16, M=M, dt=1e-6, T_final=0.01)
    yield "mcf", mcf_solver_config(mc), 0.3 + np.sin(2 * np.pi * x)


def test_criterion_1_mass_conservation(acceptance_log):
    worst_step = worst_run = 0.0
    slowest = 0.0
    M = 256
    for name, cfg, xi in _mass_cases():
        t0 = time.perf_counter()
        paths = [sample_path(s, cfg.evaluator.modes, cfg.dt, cfg.steps) for s in range(4)]
        tr = run_batch(np.broadcast_to(xi, (4, M)), cfg, paths)
        slowest = max(slowest, time.perf_counter() - t0)
        mass = tr.diagnostics["mass"]
        worst_step = max(worst_step, float(np.max(np.abs(np.diff(mass, axis=0)))))
        worst_run = max(worst_run, float(np.max(np.abs(mass[-1] - mass[0]))))
    ok = worst_step <= 1e-12 * M and worst_run <= 1e-9 and slowest <= 60
    acceptance_log(1, ok, f"per-step {worst_step:.2e} <= {1e-12 * M:.1e}, run {worst_run:.2e} <= 1e-9, "
                          f"slowest {slowest:.1f}s")
    assert ok


# -- 2: heat oracle -----------------------------------------------------------


def _heat_error(M, dt, T=0.01):
    heat = regularize(make_linear(), 4)
    from gradnoise.coefficients import Profile, SeparableCoefficients

    cfg = SolverConfig(heat, SeparableCoefficients([[]], Profile("one")), dt, T, M)
    x, = grid_coords(M)
    tr = run_batch(np.cos(2 * np.pi * x)[None], cfg, [sample_path(0, 0, dt, cfg.steps)])
    return float(np.max(np.abs(tr.snapshots[-1, 0] - math.exp(-4 * math.pi**2 * T) * np.cos(2 * np.pi * x))))


def test_criterion_2_heat_oracle(acceptance_log):
    err = _heat_error(256, 1e-6)
    # spatial order measured with the time error pushed below the h^2 error
    ratio = _heat_error(128, 1e-7) / _heat_error(256, 1e-7)
    ok = err <= 1e-3 and 3.5 <= ratio <= 4.5
    acceptance_log(2, ok, f"max error {err:.2e} <= 1e-3, h-ratio {ratio:.3f} in [3.5, 4.5]")
    assert ok


# -- 3: regularization contract ----------------------------------------------


def test_criterion_3_regularization_contract(acceptance_log):
    fam = make_power_law(2)
    worst_floor = worst_gap = -math.inf
    ok = True
    for n in (2, 4, 8, 16):
        reg = regularize(fam, n)
        r = np.linspace(-4 * n, 4 * n, 40001)
        floor = float(np.min(reg.a_frak(r)))
        core = r[np.abs(r) <= n]
        gap = float(np.max(np.abs(fam.a_frak(core) - reg.a_frak(core))))
        ok &= floor >= 2 / n and gap <= 4 / n
        worst_floor = max(worst_floor, 2 / n - floor)
        worst_gap = max(worst_gap, gap - 4 / n)
    acceptance_log(3, ok, f"max(2/n - min a_n) = {worst_floor:.3g} <= 0, max(gap - 4/n) = {worst_gap:.3g} <= 0")
    assert ok


# -- 4: curvature-flow construction --------------------------------------------


def test_criterion_4_mcf_construction(acceptance_log):
    area_err = 0.0
    coerc = -math.inf
    r = np.linspace(-50, 50, 20001)
    for n in (1, 2, 4, 8, 16):
        c = mcf_cutoff(n)
        assert c == pytest.approx(n + (1 + n * n) / n, rel=1e-15)
        area = integrate.quad(lambda s: float(mcf_b(n, s)), n, c, epsabs=1e-14, epsrel=1e-14)[0]
        area_err = max(area_err, abs(area + 1 / (2 * math.sqrt(1 + n * n))))
        reg = mcf_regularize(n)
        coerc = max(coerc, float(np.max(1 / np.abs(reg.a_frak(r)) - 2 * (1 + np.abs(r)))))
    ok = area_err <= 1e-10 and coerc <= 0
    acceptance_log(4, ok, f"cutoff area error {area_err:.2e} <= 1e-10, max(1/|a_n| - 2(1+|r|)) = {coerc:.3g} <= 0")
    assert ok


# -- 5-9: the standard suite -------------------------------------------------------


def test_criterion_5_contraction(standard, acceptance_log):
    rep = standard["reports"]["contraction"]
    m = rep["metrics"]
    bound = math.exp(m["C_hat"] * rep["params"]["T_final"])
    ok = rep["passed"] and m["C_hat"] <= 5 and m["sup_ratio_upper"] <= bound * (1 + 1e-12) and not m["blowup"]
    acceptance_log(5, ok, f"C_hat {m['C_hat']:.3f} <= 5, sup upper ratio {m['sup_ratio_upper']:.3f} <= "
                          f"{bound:.3f}, blow-up {m['blowup']}, excluded {m['excluded']}")
    assert ok


def test_criterion_6_moment_uniformity(standard, acceptance_log):
    rep = standard["reports"]["moments"]
    m = rep["metrics"]
    spread = max(m["ratio_l2"]["max_over_min"], m["ratio_lm"]["max_over_min"])
    ok = rep["passed"] and spread <= 2.0
    acceptance_log(6, ok, f"max/min moment ratio {spread:.3f} <= 2 over n {rep['params']['ns']} x M {rep['params']['Ms']}")
    assert ok


def test_criterion_7_entropy_residual(standard, acceptance_log):
    rep = standard["reports"]["entropy"]
    det = rep["deterministic"]["metrics"]["residual"]
    rows = rep["metrics"]["levels"]
    ratios = rep["metrics"]["shrink_ratios"]
    env = all(r["within_envelope"] for r in rows)
    ok = det <= 1e-6 and env and all(q >= 2.0 for q in ratios)
    acceptance_log(7, ok, f"deterministic {det:.2e} <= 1e-6, envelope {env}, "
                          f"shrink {', '.join(f'{q:.2f}' for q in ratios)} (need >= 2)")
    assert ok


def test_criterion_8_fractional_regularity(standard, acceptance_log):
    rep = standard["reports"]["fracreg"]
    slope = rep["metrics"]["slope"]
    ok = slope >= 2 / 3 - 0.15
    acceptance_log(8, ok, f"slope {slope:.3f} >= {2 / 3 - 0.15:.3f}")
    assert ok


def test_criterion_9_phi_stability(standard, acceptance_log):
    rep = standard["reports"]["phistab"]
    m = rep["metrics"]
    d = m["distance_mean"]
    decreasing = all(b < a for a, b in zip(d, d[1:]))
    r_ok = all(float(R) >= n for R, n in zip(m["R_lambda"], m["n"]))
    ok = decreasing and r_ok and rep["passed"]
    acceptance_log(9, ok, f"distances {', '.join(f'{v:.3e}' for v in d)} strictly decreasing {decreasing}, "
                          f"R_(8/n) >= n {r_ok}")
    assert ok


def test_standard_suite_other_experiments(standard):
    for name in ("mcf-consistency", "initial-continuity"):
        assert standard["reports"][name]["passed"], name


# -- 10: reproducibility -----------------------------------------------------------

REDUCED = """
equation = "pme"
[grid]
M = 32
[time]
T_final = 0.01
[ensemble]
count = 16
chunk = 4
[experiments]
run = ["contraction", "moments", "entropy", "fracreg", "phistab", "mcf-consistency", "initial-continuity"]
[experiments.moments]
ns = [2, 4]
Ms = [16, 32]
T_final = 0.005
count = 8
[experiments.entropy]
det_M = 32
det_T = 0.002
det_dt = 1e-5
M0 = 8
levels = 2
count = 16
T_final = 0.01
[experiments.fracreg]
M = 64
T_final = 0.005
epsilons_h = [2, 4, 8]
[experiments.phistab]
M = 16
ns = [2, 4]
count = 8
T_final = 0.01
[experiments.mcf-consistency]
Ms = [64, 128]
[experiments.initial-continuity]
h_max = 0.004
snapshots = 9
count = 8
"""


def test_criterion_10_reproducibility(tmp_path, acceptance_log):
    cfg = parse_config(REDUCED)
    dirs = [tmp_path / "a", tmp_path / "b", tmp_path / "c"]
    for d, jobs in zip(dirs, (1, 1, max(2, JOBS))):
        run_experiments(cfg, d, jobs=jobs)
    names = sorted(p.name for p in dirs[0].glob("*.json"))
    same = all((dirs[0] / n).read_bytes() == (d / n).read_bytes() for d in dirs[1:] for n in names)
    same &= all(sorted(p.name for p in d.glob("*.json")) == names for d in dirs[1:])
    acceptance_log(10, same, f"{len(names)} JSON reports byte-identical over two runs and a {max(2, JOBS)}-worker run")
    assert same
