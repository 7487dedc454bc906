import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradnoise.coefficients import Profile, SeparableCoefficients, separable
from gradnoise.noise import sample_path
from gradnoise.nonlinearity import make_linear, make_power_law, regularize
from gradnoise.solver import (
    BlowUpError,
    CFLError,
    GridFunction,
    SolverConfig,
    grid_coords,
    read_binary,
    run,
    run_batch,
    run_coupled,
    run_ensemble,
    step,
    truncate_initial,
    write_binary,
    write_csv,
)

HEAT = regularize(make_linear(), 4)
PME2 = regularize(make_power_law(2), 4)


def no_noise(d=1):
    return SeparableCoefficients([[] for _ in range(d)], Profile("one"))


def cos_noise(amp=0.2, modes=1, d=1):
    return separable(amp, kappa=1.0, profile="sqrt", modes=modes, d=d)


def heat_error(M, dt, T=0.01):
    cfg = SolverConfig(HEAT, no_noise(), dt, T, M)
    x, = grid_coords(M)
    tr = run(np.cos(2 * np.pi * x), cfg, sample_path(0, 0, dt, cfg.steps))
    exact = math.exp(-4 * math.pi**2 * T) * np.cos(2 * np.pi * x)
    return float(np.max(np.abs(tr.snapshots[-1] - exact)))


def test_truncate_initial():
    assert np.all(truncate_initial(np.full(5, 5.0), 3) == 3.0)
    x = np.linspace(-1, 1, 11)
    assert np.array_equal(truncate_initial(x, 2), x)
    xi = 10 * np.sin(2 * np.pi * grid_coords(64)[0])
    t = truncate_initial(GridFunction(1, 64, xi), 2)
    assert t.values.min() >= -2 and t.values.max() <= 2
    small = np.abs(xi) <= 2
    assert np.array_equal(t.values[small], xi[small])


def test_constant_is_fixed_point():
    cfg = SolverConfig(HEAT, no_noise(), 1e-5, 1e-5, 32)
    assert np.array_equal(step(np.full(32, 0.7), cfg, []), np.full(32, 0.7))


def test_heat_oracle():
    assert heat_error(256, 1e-6) <= 1e-3


def test_heat_second_order_in_space():
    e1, e2 = heat_error(64, 1e-7), heat_error(128, 1e-7)
    assert 3.5 <= e1 / e2 <= 4.5


@given(seed=st.integers(0, 10_000), amp=st.floats(0.0, 0.5), d=st.sampled_from([1, 2]))
def test_mass_conserved_per_step(seed, amp, d):
    M = 16
    co = cos_noise(amp, modes=2, d=d)
    cfg = SolverConfig(PME2, co, 1e-5, 1e-5, M, dim=d)
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.5, 1.5, (M,) * d)
    new = step(u, cfg, rng.normal(0, math.sqrt(cfg.dt), 2))
    assert abs(new.sum() - u.sum()) <= 1e-12 * M**d


def test_zero_horizon_returns_truncated_datum():
    cfg = SolverConfig(PME2, cos_noise(), 1e-5, 0.0, 32)
    xi = 8 * np.sin(2 * np.pi * grid_coords(32)[0])
    tr = run(xi, cfg, sample_path(0, 1, 1e-5, 1))
    assert tr.snapshots.shape == (1, 32)
    assert np.array_equal(tr.snapshots[0], np.clip(xi, -4, 4))


def test_pme_bump_mass_constant():
    M = 128
    x, = grid_coords(M)
    xi = np.maximum(0.0, 1 - 16 * (x - 0.5) ** 2)
    cfg = SolverConfig(PME2, no_noise(), 2e-6, 0.01, M)
    tr = run(xi, cfg, sample_path(0, 0, cfg.dt, cfg.steps))
    mass = tr.diagnostics["mass"]
    assert np.max(np.abs(mass - mass[0])) <= 1e-12


def test_run_is_deterministic():
    cfg = SolverConfig(PME2, cos_noise(), 1e-5, 0.002, 32)
    xi = 1 + 0.5 * np.sin(2 * np.pi * grid_coords(32)[0])
    p = sample_path(123, 1, cfg.dt, cfg.steps)
    a = run(xi, cfg, p, [0.0, 0.001, 0.002])
    b = run(xi, cfg, sample_path(123, 1, cfg.dt, cfg.steps), [0.0, 0.001, 0.002])
    assert np.array_equal(a.snapshots, b.snapshots)


def test_coupled_identical_data():
    cfg = SolverConfig(PME2, cos_noise(), 1e-5, 0.002, 32)
    xi = 1 + 0.5 * np.sin(2 * np.pi * grid_coords(32)[0])
    ta, tb = run_coupled(xi, xi, cfg, sample_path(4, 1, cfg.dt, cfg.steps))
    assert np.array_equal(ta.snapshots, tb.snapshots)


def test_zero_stays_zero_without_noise():
    cfg = SolverConfig(PME2, no_noise(), 1e-5, 0.002, 32)
    xi = 1 + 0.5 * np.sin(2 * np.pi * grid_coords(32)[0])
    _, tb = run_coupled(xi, np.zeros(32), cfg, sample_path(4, 0, cfg.dt, cfg.steps))
    assert np.all(tb.snapshots == 0.0)


def test_sup_non_increasing_at_half_budget():
    M = 64
    x, = grid_coords(M)
    xi = np.maximum(0.0, 1 - 16 * (x - 0.5) ** 2)
    probe = SolverConfig(PME2, no_noise(), 1.0, 0.0, M)
    dt = 0.5 * probe.budget(1.0)
    steps = 400
    cfg = SolverConfig(PME2, no_noise(), dt, dt * steps, M)
    tr = run(xi, cfg, sample_path(0, 0, dt, steps), np.arange(steps + 1) * dt)
    sup = tr.snapshots.max(axis=1)
    assert np.all(np.diff(sup) <= 1e-15)


@given(seed=st.integers(0, 1000))
def test_comparison_principle(seed):
    M = 32
    rng = np.random.default_rng(seed)
    xb = rng.uniform(0, 1, M)
    xa = xb + rng.uniform(0, 0.5, M)
    cfg = SolverConfig(PME2, no_noise(), 2e-5, 0.004, M)
    ta, tb = run_coupled(xa, xb, cfg, sample_path(0, 0, cfg.dt, cfg.steps), np.linspace(0, 0.004, 5))
    assert np.all(ta.snapshots >= tb.snapshots - 1e-10)


def test_cfl_violation_rejected():
    cfg = SolverConfig(PME2, no_noise(), 1e-2, 1e-2, 64)
    with pytest.raises(CFLError, match="CFL budget"):
        step(np.ones(64), cfg, [])
    with pytest.raises(ValueError):
        SolverConfig(PME2, no_noise(), 1e-5, 1e-5, 32, cfl_safety=1.5)


def test_blowup_guard():
    cfg = SolverConfig(PME2, no_noise(), 1e-6, 1e-6, 16, blowup=0.5)
    with pytest.raises(BlowUpError):
        step(np.ones(16), cfg, [])


def test_mask_mode_excludes_failing_samples():
    cfg = SolverConfig(PME2, no_noise(), 1e-6, 1e-5, 16, blowup=1.5)
    u0 = np.stack([np.ones(16), np.full(16, 2.0)])
    paths = [sample_path(s, 0, 1e-6, 10) for s in range(2)]
    with pytest.raises(BlowUpError):
        run_batch(u0, cfg, paths)
    tr = run_batch(u0, cfg, paths, on_blowup="mask")
    assert tr.failed[0] == -1 and tr.failed[1] == 1


def test_ensemble_independent_of_jobs():
    cfg = SolverConfig(PME2, cos_noise(), 1e-5, 0.001, 16)
    xi = (1 + 0.5 * np.sin(2 * np.pi * grid_coords(16)[0]))[None]
    (a,), _ = run_ensemble(xi, cfg, range(10), jobs=1, chunk=4)
    (b,), _ = run_ensemble(xi, cfg, range(10), jobs=3, chunk=4)
    assert np.array_equal(a.snapshots, b.snapshots)
    single = run(xi[0], cfg, sample_path(7, cfg.evaluator.modes, cfg.dt, cfg.steps))
    assert np.array_equal(a.snapshots[:, 7], single.snapshots)


def test_csv_and_binary_output(tmp_path):
    cfg = SolverConfig(PME2, cos_noise(), 1e-5, 2e-5, 8)
    tr = run(np.linspace(0, 1, 8), cfg, sample_path(1, 1, 1e-5, 2), [0.0, 1e-5, 2e-5])
    write_csv(tr, tmp_path / "u.csv")
    rows = np.loadtxt(tmp_path / "u.csv", delimiter=",", skiprows=1)
    assert rows.shape == (24, 3)
    assert np.array_equal(rows[:, 2].reshape(3, 8), tr.snapshots)
    write_binary(tr, tmp_path / "u.bin")
    times, snaps = read_binary(tmp_path / "u.bin")
    assert np.array_equal(times, tr.times) and np.array_equal(snaps, tr.snapshots)
    raw = (tmp_path / "u.bin").read_bytes()
    assert raw[:12] == np.array([1, 8, 3], dtype="<u4").tobytes()
