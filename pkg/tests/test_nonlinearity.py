import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from gradnoise.nonlinearity import (
    bracket,
    check_assumption_A,
    make_arctan,
    make_family,
    make_linear,
    make_power_law,
    mcf_b,
    mcf_cutoff,
    mcf_regularize,
    r_lambda,
    regularize,
)

finite = st.floats(-50, 50, allow_nan=False)


def test_power_law_values():
    f2 = make_power_law(2)
    assert f2.phi(1.0) == 1.0
    assert f2.a_frak(1.0) == pytest.approx(math.sqrt(2))
    assert make_power_law(3).phi(-2.0) == -8.0


def test_power_law_rejects_fast_diffusion():
    with pytest.raises(ValueError):
        make_power_law(1.0)
    with pytest.raises(KeyError):
        make_family("cubic")


@given(r=finite)
def test_families_are_odd(r):
    for fam in (make_power_law(2), make_power_law(3.5), make_arctan(), make_linear()):
        assert fam.phi(-r) == -fam.phi(r)


@given(r=st.floats(0.01, 20), s=st.floats(1e-3, 5))
def test_families_strictly_increasing(r, s):
    for fam in (make_power_law(2), make_arctan(), make_linear()):
        assert fam.phi(r + s) > fam.phi(r)


@pytest.mark.parametrize("fam", [make_power_law(2), make_power_law(3), make_arctan()])
def test_a_is_root_of_phi_prime(fam):
    r = np.concatenate([np.linspace(-5, -0.1, 50), np.linspace(0.1, 5, 50)])
    step = 1e-6
    fd = (fam.phi(r + step) - fam.phi(r - step)) / (2 * step)
    assert np.max(np.abs(fam.a_frak(r) - np.sqrt(fd)) / fam.a_frak(r)) <= 1e-4


def test_power_law_derivative_bound_with_K1():
    # grid maximisation of |a'(r)| / r^((m-3)/2) for m = 2 (closed form: sqrt(2)/2)
    r = np.geomspace(1e-6, 1e3, 20001)
    fam = make_power_law(2)
    ratio = np.abs(fam.a_frak_prime(r)) / r ** (-0.5)
    assert ratio.max() == pytest.approx(math.sqrt(2) / 2, rel=1e-12)
    assert ratio.max() <= 1.0


def test_assumption_A_power_law_passes():
    grid = np.linspace(-5, 5, 121)
    rep = check_assumption_A(make_power_law(2, K=2), grid)
    assert rep.passed, rep.to_dict()
    assert len(rep.checks) == 4


def test_assumption_A_arctan_fails_lower_bound():
    rep = check_assumption_A(make_arctan(K=2), np.linspace(-10, 10, 81))
    assert "K a(r) >= 1 for |r| >= 1" in rep.violations()


def test_assumption_A_heat_passes():
    assert check_assumption_A(make_linear(), np.linspace(-3, 3, 61), K=1).passed


def test_bracket_values():
    assert bracket(lambda s: 1.0, 2.0) == pytest.approx(2.0, abs=1e-12)
    assert bracket(lambda s: (1 + s * s) ** -0.5, 1.0) == pytest.approx(0.881373587019543, abs=1e-10)
    assert bracket(np.cos, 0.0) == 0.0
    assert bracket(lambda s: 1.0, -2.0) == pytest.approx(-2.0, abs=1e-12)


@pytest.mark.parametrize("n", [2, 4, 8, 16])
def test_regularization_contract(n):
    fam = make_power_law(2)
    reg = regularize(fam, n)
    r = np.linspace(-3 * n, 3 * n, 60001)
    assert reg.a_frak(r).min() >= 2.0 / n
    inner = np.abs(r) <= n
    assert np.max(np.abs(fam.a_frak(r[inner]) - reg.a_frak(r[inner]))) <= 4.0 / n


def test_regularized_heat_is_unchanged():
    reg = regularize(make_linear(), 4)
    r = np.linspace(-10, 10, 2001)
    assert np.allclose(reg.a_frak(r), 1.0, atol=1e-12)
    assert np.allclose(reg.phi(r), r, atol=1e-9)


@given(r=finite)
def test_regularized_phi_is_odd(r):
    reg = regularize(make_power_law(2), 4)
    assert reg.phi(-r) + reg.phi(r) == 0.0


def test_regularized_phi_prime_matches_a_squared():
    n = 4
    reg = regularize(make_power_law(2), n)
    r = np.linspace(-n - 1, n + 1, 4001)
    # exclude bands of width 2/n^2 around the clamp points |r| = n and the floor crossings
    fam = make_power_law(2)
    r_floor = (2.0 / n) ** 2 / 2.0
    kinks = np.array([n, r_floor])
    keep = np.all(np.abs(np.abs(r)[:, None] - kinks[None]) > 2.0 / n**2, axis=1)
    step = 1e-5
    fd = (reg.phi(r + step) - reg.phi(r - step)) / (2 * step)
    sq = reg.a_frak(r) ** 2
    assert np.max(np.abs(fd[keep] - sq[keep]) / sq[keep]) <= 1e-4
    assert fam.m == reg.m


def test_regularized_phi_prime_bound():
    reg = regularize(make_power_law(2), 8)
    r = np.linspace(-20, 20, 40001)
    assert np.max(reg.a_frak(r) ** 2) <= reg.phi_prime_sup(20) * (1 + 1e-12)


def test_bracket_table_matches_quadrature(rng):
    reg = regularize(make_power_law(2), 4)
    r = rng.uniform(-6, 6, 10)
    # clamp edge |r| = 4 and floor crossing |r| = 1/8 of a_4, widened by the mollifier width 1/16
    kinks = [sg * (k + w) for k in (0.125, 4.0) for w in (-1 / 16, 0.0, 1 / 16) for sg in (-1, 1)]
    quad = np.array([
        integrate.quad(lambda s: float(reg.a_frak(s)), 0.0, x, epsabs=1e-13, epsrel=1e-13, limit=400,
                       points=[k for k in kinks if min(0, x) < k < max(0, x)] or None)[0]
        for x in r
    ])
    assert np.max(np.abs(reg.bracket_a(r) - quad)) <= 1e-8


# --- curve shortening family ------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 4, 8, 16])
def test_cutoff_area_identity(n):
    c = mcf_cutoff(n)
    assert c == n + (1 + n * n) / n
    val = integrate.quad(lambda r: float(mcf_b(n, r)), n, c, epsabs=1e-13, epsrel=1e-13)[0]
    assert abs(val + 1 / (2 * math.sqrt(1 + n * n))) <= 1e-10


def test_cutoff_n1():
    assert mcf_cutoff(1) == 3.0
    val = integrate.quad(lambda r: float(mcf_b(1, r)), 1, 3, epsabs=1e-13)[0]
    assert val == pytest.approx(-0.35355339059327373, abs=1e-10)


@given(n=st.sampled_from([1, 2, 4, 8]), s=st.floats(0, 1))
def test_mcf_b_on_core(n, s):
    r = s * n
    assert mcf_b(n, r) == pytest.approx(-r * (1 + r * r) ** -1.5, abs=1e-15)


@pytest.mark.parametrize("n", [1, 2, 4, 8, math.inf])
def test_mcf_coercivity(n):
    reg = mcf_regularize(n)
    r = np.linspace(-50, 50, 200001)
    assert np.all(1.0 / np.abs(reg.a_frak(r)) <= 2 * (1 + np.abs(r)))


@pytest.mark.parametrize("n", [1, 4])
def test_mcf_constant_beyond_cutoff(n):
    reg = mcf_regularize(n)
    c = mcf_cutoff(n)
    tail = reg.a_frak(np.linspace(c, c + 30, 50))
    assert np.all(tail == tail[0])
    # 1 + int_0^n b_n + int_n^c b_n = 1/sqrt(1+n^2) - 1/(2 sqrt(1+n^2))
    assert tail[0] == pytest.approx(0.5 / math.sqrt(1 + n * n), abs=1e-14)


@pytest.mark.parametrize("n", [2, 8])
def test_mcf_phi_is_integral_of_a_squared(n):
    reg = mcf_regularize(n)
    for r in (0.3, n - 0.1, n + 0.7, mcf_cutoff(n) + 2.0, -(n + 0.5)):
        pts = [p for p in (n, mcf_cutoff(n), -n, -mcf_cutoff(n)) if min(0, r) < p < max(0, r)]
        quad = integrate.quad(lambda s: float(reg.a_frak(s)) ** 2, 0, r, epsabs=1e-13, epsrel=1e-13,
                              limit=200, points=pts or None)[0]
        assert float(reg.phi(r)) == pytest.approx(quad, abs=1e-10)


def test_mcf_infinite_is_arctan():
    reg = mcf_regularize(math.inf)
    r = np.linspace(-20, 20, 101)
    assert np.array_equal(reg.phi(r), np.arctan(r))
    quad = integrate.quad(lambda s: 1 / (1 + s * s), 0, 3.0, epsabs=1e-14)[0]
    assert abs(reg.phi(3.0) - quad) <= 1e-10


@pytest.mark.parametrize("n", [2, 4, 8])
def test_r_lambda_at_least_n(n):
    fam = make_power_law(2)
    R = r_lambda(regularize(fam, n).a_frak, regularize(fam, 2 * n).a_frak, 8.0 / n, r_max=8.0 * n)
    assert R >= n


def test_r_lambda_identical_functions_is_infinite():
    f = make_power_law(2).a_frak
    assert r_lambda(f, f, 0.1, 5.0) == math.inf
