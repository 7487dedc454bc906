import math

import numpy as np
import pytest
from scipy import integrate

from gradnoise.analysis.experiments import (
    contraction_experiment,
    frac_regularity_check,
    initial_time_continuity,
    jsonable,
    moment_check,
    moment_uniformity,
    phi_stability_experiment,
)
from gradnoise.analysis.stats import l1_distance
from gradnoise.coefficients import Profile, SeparableCoefficients, separable
from gradnoise.noise import sample_path
from gradnoise.nonlinearity import make_linear, make_power_law, regularize
from gradnoise.solver import SolverConfig, grid_coords, run, run_coupled, run_ensemble

PME2 = regularize(make_power_law(2), 4)
HEAT = regularize(make_linear(), 4)


def no_noise(d=1):
    return SeparableCoefficients([[] for _ in range(d)], Profile("one"))


def bump(x, c=0.5, w=0.25, top=1.0):
    return top * np.maximum(0.0, 1 - ((x - c) / w) ** 2)


def test_contraction_identical_data_gives_zero():
    cfg = SolverConfig(PME2, separable(0.2), 1e-5, 0.002, 32)
    x, = grid_coords(32)
    xi = 1 + 0.5 * np.sin(2 * np.pi * x)
    rep = contraction_experiment(xi, xi, cfg, range(8))
    m = rep["metrics"]
    assert m["initial_distance"] == 0.0
    assert all(r == 0.0 for r in m["ratio_mean"]) and m["C_hat"] == 0.0
    assert rep["passed"]


def test_deterministic_contraction_ratio_non_increasing():
    cfg = SolverConfig(PME2, no_noise(), 2e-5, 0.02, 64)
    x, = grid_coords(64)
    rep = contraction_experiment(bump(x, 0.4), bump(x, 0.6, 0.2, 1.5), cfg, range(2),
                                 snapshot_times=np.linspace(0, 0.02, 21))
    r = np.array(rep["metrics"]["ratio_mean"])
    assert r[0] == pytest.approx(1.0)
    assert np.all(np.diff(r) <= 1e-12)
    assert rep["passed"]


def test_ordered_coupling_distance_equals_mass_difference():
    cfg = SolverConfig(PME2, no_noise(), 2e-5, 0.01, 64)
    x, = grid_coords(64)
    lo = bump(x)
    hi = lo + 0.3 + 0.2 * np.cos(2 * np.pi * x)
    ta, tb = run_coupled(hi, lo, cfg, sample_path(0, 0, cfg.dt, cfg.steps), np.linspace(0, 0.01, 6))
    dist = l1_distance(ta.snapshots, tb.snapshots)
    mass = (ta.snapshots - tb.snapshots).sum(axis=1) * cfg.h
    assert np.max(np.abs(dist - mass)) <= 1e-10


def test_moments_zero_solution():
    co = separable(0.2, kappa=0.0, profile="sqrt")
    cfg = SolverConfig(PME2, co, 1e-5, 0.002, 32, track_gradients=True)
    (tr,), _ = run_ensemble(np.zeros((1, 32)), cfg, range(4))
    assert np.all(tr.snapshots == 0.0)
    m = moment_check(tr, 2.0)["metrics"]
    assert m["ratio_l2"] == 0.0 and m["ratio_lm"] == 0.0


def test_moments_heat_decay():
    cfg = SolverConfig(HEAT, no_noise(), 2e-5, 0.01, 64, track_gradients=True)
    x, = grid_coords(64)
    (tr,), _ = run_ensemble(np.cos(2 * np.pi * x)[None], cfg, range(2))
    m = moment_check(tr, 1.0)["metrics"]
    assert m["E_sup_l2"] == m["E_init_l2"]
    assert m["ratio_l2"] <= 1.0
    with pytest.raises(ValueError, match="track_gradients"):
        moment_check(run_ensemble(np.zeros((1, 64)), SolverConfig(HEAT, no_noise(), 2e-5, 2e-5, 64), [0])[0][0], 1.0)


def test_moment_uniformity_factor():
    rep = lambda a, b: {"metrics": {"ratio_l2": a, "ratio_lm": b}}
    assert moment_uniformity([rep(1.0, 1.0), rep(1.9, 1.2)])["passed"]
    assert not moment_uniformity([rep(1.0, 1.0), rep(2.1, 1.2)])["passed"]
    assert moment_uniformity([rep(0.0, 0.0), rep(0.0, 0.0)])["passed"]


def _static_traj(values, T=4e-5, snaps=5):
    cfg = SolverConfig(HEAT, no_noise(), 1e-5, T, values.shape[-1])
    (tr,), _ = run_ensemble(values[None], cfg, range(2), np.linspace(0, T, snaps))
    return tr


def test_fracreg_constant_is_zero():
    tr = _static_traj(np.full(64, 0.3))
    rep = frac_regularity_check(tr, 2.0, [4 / 64, 8 / 64])
    assert all(v == 0.0 for v in rep["metrics"]["lhs"])


def test_fracreg_lipschitz_profile_has_unit_slope():
    M = 1024
    x, = grid_coords(M)
    prof = np.clip(4 * np.abs(x - 0.5) - 0.5, 0.0, 1.0)
    cfg = SolverConfig(HEAT, no_noise(), 1e-9, 1e-9, M)
    tr = run(prof, cfg, sample_path(0, 0, 1e-9, 1), [0.0, 1e-9])
    radii = np.array([2, 4, 8, 16])
    rep = frac_regularity_check(tr, 2.0, radii / M)
    # total variation 2, so each shift s contributes exactly 2|s|; uniform weights over |j| <= r
    exact = 2.0 / M * radii * (radii + 1) / (2 * radii + 1) * 1e-9
    assert np.allclose(rep["metrics"]["lhs"], exact, rtol=1e-9)
    assert rep["metrics"]["slope"] >= 0.9 and rep["passed"]


def test_fracreg_pme_bump_slope():
    M = 256
    x, = grid_coords(M)
    cfg = SolverConfig(PME2, no_noise(), 2e-6, 0.01, M, track_gradients=True)
    (tr,), _ = run_ensemble(bump(x)[None], cfg, range(2), np.linspace(0, 0.01, 11))
    rep = frac_regularity_check(tr, 2.0, np.array([4, 8, 16, 32]) / M)
    assert rep["metrics"]["slope"] >= 0.517 and rep["passed"]


def test_fracreg_rejects_unresolved_epsilon():
    tr = _static_traj(np.zeros(64))
    with pytest.raises(ValueError, match="2h"):
        frac_regularity_check(tr, 2.0, [1 / 64])


def test_phistab_same_n_gives_zero():
    cfg = SolverConfig(PME2, separable(0.2), 1e-5, 0.002, 32)
    x, = grid_coords(32)
    rep = phi_stability_experiment(make_power_law(2), 4, 4, cfg, range(4), 1 + 0.5 * np.sin(2 * np.pi * x))
    assert rep["metrics"]["distance_mean"] == 0.0
    assert rep["metrics"]["R_lambda_ok"] and rep["passed"]
    with pytest.raises(ValueError):
        phi_stability_experiment(make_power_law(2), 8, 4, cfg, range(4), np.ones(32))


def test_continuity_fixed_point():
    cfg = SolverConfig(PME2, separable(0.2, profile="linear"), 1e-5, 0.004, 32)
    (tr,), _ = run_ensemble(np.zeros((1, 32)), cfg, range(4), np.linspace(0, 0.004, 9))
    rep = initial_time_continuity(tr, np.zeros(32), 0.004)
    assert rep["metrics"]["g"] == [0.0, 0.0, 0.0]


def test_continuity_heat_matches_closed_form():
    M, T = 128, 0.004
    x, = grid_coords(M)
    xi = np.cos(2 * np.pi * x)
    cfg = SolverConfig(HEAT, no_noise(), 1e-6, T, M)
    (tr,), _ = run_ensemble(xi[None], cfg, range(2), np.linspace(0, T, 201))
    rep = initial_time_continuity(tr, xi, T)
    k = 4 * math.pi**2
    exact = [integrate.quad(lambda t: 0.5 * (math.exp(-k * t) - 1) ** 2, 0, s)[0] / s for s in (T, T / 2, T / 4)]
    assert np.allclose(rep["metrics"]["g"], exact, rtol=0.01)
    assert rep["passed"]
    assert rep["metrics"]["ratio_quarter"] == pytest.approx(exact[2] / exact[0], rel=0.01)


def test_continuity_needs_early_snapshots():
    tr = _static_traj(np.zeros(64), T=0.01, snaps=3)
    with pytest.raises(ValueError):
        initial_time_continuity(tr, np.zeros(64), 0.004)


def test_jsonable_converts_numpy():
    out = jsonable({"a": np.float64(1.5), "b": np.arange(3), "c": [np.bool_(True)], "d": math.inf})
    assert out["a"] == 1.5 and out["b"] == [0, 1, 2] and out["c"] == [True]
    assert type(out["a"]) is float
