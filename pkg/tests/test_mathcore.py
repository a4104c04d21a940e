import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffunlearn.mathcore import Rng, mean_and_covariance, sample_standard_normal, sample_uniform01


def test_normal_same_seed_identical():
    np.testing.assert_array_equal(sample_standard_normal(Rng(5), 2), sample_standard_normal(Rng(5), 2))


def test_normal_moments():
    x = sample_standard_normal(Rng(0), 100_000)
    assert abs(x.mean()) <= 0.02
    assert abs(x.var() - 1.0) <= 0.03


def test_zero_extent_shape_is_empty():
    assert sample_standard_normal(Rng(0), 0).shape == (0,)
    assert sample_uniform01(Rng(0), (0, 3)).shape == (0, 3)


def test_uniform_support_and_mean():
    u = sample_uniform01(Rng(1), 100_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) <= 0.01


def test_uniform_same_seed_identical():
    np.testing.assert_array_equal(sample_uniform01(Rng(9), 50), sample_uniform01(Rng(9), 50))


def test_spawn_is_stable_and_independent_of_parent_use():
    parent = Rng(3)
    a = parent.spawn("noise").normal(4)
    parent.normal(100)
    b = parent.spawn("noise").normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, parent.spawn("batches").normal(4))
    np.testing.assert_array_equal(Rng(3).spawn("a", 1).normal(3), Rng(3).spawn("a").spawn(1).normal(3))


def test_choice_has_no_repeats():
    idx = Rng(0).choice(50, 50)
    assert sorted(idx.tolist()) == list(range(50))


def test_rejects_bad_seed_and_key():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(0).spawn(-3)


def test_two_point_covariance():
    m, c = mean_and_covariance(np.array([[0.0, 0.0], [2.0, 0.0]]))
    np.testing.assert_array_equal(m, [1.0, 0.0])
    np.testing.assert_array_equal(c, [[2.0, 0.0], [0.0, 0.0]])


def test_repeated_point_has_zero_covariance():
    _, c = mean_and_covariance(np.tile([1.5, -2.0, 3.0], (10, 1)))
    np.testing.assert_array_equal(c, np.zeros((3, 3)))


def test_gaussian_sample_moments():
    m, c = mean_and_covariance(Rng(2).normal((10_000, 2)))
    assert np.all(np.abs(m) <= 0.05)
    assert np.all(np.abs(c - np.eye(2)) <= 0.05)


def test_insufficient_samples():
    with pytest.raises(ValueError, match="insufficient samples"):
        mean_and_covariance(np.zeros((1, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 40), st.integers(1, 5))
def test_covariance_matches_numpy_and_is_symmetric(seed, n, d):
    x = Rng(seed).normal((n, d)) * 10
    m, c = mean_and_covariance(x)
    np.testing.assert_allclose(m, x.mean(axis=0))
    np.testing.assert_allclose(c, np.atleast_2d(np.cov(x, rowvar=False)), atol=1e-10)
    assert np.array_equal(c, c.T)
