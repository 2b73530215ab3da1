"""Quadrature rule and the counter-based Gaussian stream."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from zvonkin import _kernels as K
from zvonkin.quadrature import cumulative_hermite, richardson_gap
from zvonkin.rng import NoiseStream, as_seed, derive_seed

coef = st.floats(-3.0, 3.0, allow_nan=False)


@given(coef, coef, coef, coef, st.floats(0.01, 0.5), st.integers(2, 40))
def test_hermite_trapezoid_exact_for_cubics(c0, c1, c2, c3, h, n):
    x = np.arange(n) * h
    f = c0 + c1 * x + c2 * x**2 + c3 * x**3
    df = c1 + 2 * c2 * x + 3 * c3 * x**2
    exact = c0 * x + c1 * x**2 / 2 + c2 * x**3 / 3 + c3 * x**4 / 4
    np.testing.assert_allclose(cumulative_hermite(f, df, h), exact, atol=1e-10 * (1 + np.abs(exact).max()))


def test_hermite_trapezoid_negative_direction_and_axis():
    h = -0.1
    x = np.arange(11) * h
    f = np.stack([np.exp(x), np.cos(x)])
    df = np.stack([np.exp(x), -np.sin(x)])
    out = cumulative_hermite(f.T, df.T, h, axis=0)
    np.testing.assert_allclose(out[:, 0], np.expm1(x), atol=1e-7)
    np.testing.assert_allclose(out[:, 1], np.sin(x), atol=1e-7)


def test_hermite_trapezoid_fourth_order():
    errs = []
    for n in (11, 21, 41):
        x = np.linspace(0.0, 1.0, n)
        out = cumulative_hermite(np.exp(-x), -np.exp(-x), x[1] - x[0])
        errs.append(abs(out[-1] - (1 - np.exp(-1.0))))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 3.8)


def test_richardson_gap():
    coarse = np.array([0.0, 1.0, 2.0])
    fine = np.array([0.0, 0.5, 1.0, 1.5, 2.5])
    assert richardson_gap(coarse, fine) == pytest.approx(0.5 / 3.5)


# ----------------------------------------------------------------------
def test_quantile_accuracy():
    p = np.concatenate([np.logspace(-15, -1, 40), np.linspace(0.05, 0.95, 91), 1 - np.logspace(-15, -1, 40)])
    ours = np.array([K._quantile(v) for v in p])
    ref = stats.norm.ppf(p)
    assert np.max(np.abs(ours - ref) / np.maximum(1.0, np.abs(ref))) < 2e-9


def test_stream_is_a_function_of_seed_path_step():
    s = NoiseStream(7, 3)
    a = s.normals(s.keys([0, 1, 2, 3]), 5)
    b = s.normals(s.keys([3, 1]), 5)
    np.testing.assert_array_equal(a[[3, 1]], b)
    assert not np.array_equal(s.normals(s.keys([0]), 6), a[:1])
    other = NoiseStream(8, 3)
    assert not np.array_equal(other.normals(other.keys([0]), 5), a[:1])


def test_dropped_columns_do_not_shift_others():
    full = NoiseStream(11, 2)
    part = NoiseStream(11, 2, columns=[1])
    keys = full.keys(np.arange(5))
    a, b = full.normals(keys, 3), part.normals(part.keys(np.arange(5)), 3)
    np.testing.assert_array_equal(a[:, 1], b[:, 1])
    np.testing.assert_array_equal(b[:, 0], 0.0)


def test_stream_is_standard_normal():
    s = NoiseStream(2024, 1)
    z = np.concatenate([s.normals(s.keys(np.arange(20_000)), k)[:, 0] for k in range(5)])
    assert stats.kstest(z, "norm").pvalue > 1e-3
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 0.03


def test_consecutive_steps_are_uncorrelated():
    s = NoiseStream(3, 1)
    keys = s.keys(np.arange(50_000))
    a, b = s.normals(keys, 0)[:, 0], s.normals(keys, 1)[:, 0]
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(a.size)


def test_increments_scale():
    s = NoiseStream(1, 2)
    np.testing.assert_allclose(s.increments([4], 2, 0.25), 0.5 * s.normals(s.keys([4]), 2))


@given(st.integers(-(2**70), 2**70))
def test_seed_reduction(seed):
    assert 0 <= as_seed(seed) < 2**64
    assert as_seed(seed) == as_seed(seed + 2**64)


@settings(max_examples=50)
@given(st.integers(0, 2**64 - 1), st.text(min_size=1, max_size=8), st.text(min_size=1, max_size=8))
def test_derived_seeds(seed, a, b):
    assert derive_seed(seed, a) == derive_seed(seed, a)
    if a != b:
        assert derive_seed(seed, a) != derive_seed(seed, b)
