import math

import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradnoise.analysis.stats import EnsembleStats, fsum_mean, l1_distance
from gradnoise.solver import GridFunction, grid_coords

grids = arrays(np.float64, 16, elements=st.floats(-10, 10, allow_nan=False, width=64))


def test_l1_of_sine_against_zero():
    x, = grid_coords(256)
    u = GridFunction(1, 256, np.sin(2 * np.pi * x))
    v = GridFunction(1, 256, np.zeros(256))
    assert abs(l1_distance(u, v) - 2 / math.pi) <= 1e-4


@given(u=grids, v=grids, w=grids)
def test_l1_is_a_metric(u, v, w):
    d = lambda a, b: float(l1_distance(a, b))
    assert d(u, v) == d(v, u)
    assert d(u, w) <= d(u, v) + d(v, w) + 1e-12
    assert d(u, u) == 0.0
    assert (d(u, v) == 0.0) == np.array_equal(u, v)


def test_l1_batched_and_two_dimensional():
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=(2, 3, 8, 8))
    got = l1_distance(u, v, dim=2)
    assert got.shape == (3,)
    assert np.allclose(got, np.abs(u - v).sum(axis=(1, 2)) / 64)


def test_fsum_mean_is_order_independent():
    rng = np.random.default_rng(1)
    x = rng.normal(size=1000) * 10.0 ** rng.integers(-8, 8, 1000)
    assert fsum_mean(x) == fsum_mean(rng.permutation(x))


def test_single_sample_has_infinite_width():
    s = EnsembleStats.from_samples(np.array([[1.0, 2.0]]))
    assert s.count == 1 and np.all(np.isinf(s.half_width))


def test_half_width_matches_normal_formula():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    s = EnsembleStats.from_samples(x)
    assert s.mean == 2.5
    assert math.isclose(s.half_width, 1.959963984540054 * math.sqrt(5 / 3 / 4))
    assert s.lower < s.mean < s.upper


def test_half_width_scales_like_inverse_root_count():
    rng = np.random.default_rng(2)
    x = rng.exponential(size=40_000)
    w = {n: EnsembleStats.from_samples(x[:n]).half_width for n in (10_000, 20_000, 40_000)}
    assert abs(w[10_000] / w[20_000] / math.sqrt(2) - 1) <= 0.3
    assert abs(w[10_000] / w[40_000] / 2 - 1) <= 0.3
