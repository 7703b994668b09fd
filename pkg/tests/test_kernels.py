"""The numba and numpy kernel paths must agree."""

import numpy as np
import pytest

from bayesfed import kernels

pytestmark = pytest.mark.skipif(kernels.NUMBA_KERNELS is None, reason="numba not installed")

NB, NP = kernels.NUMBA_KERNELS, kernels.NUMPY_KERNELS


@pytest.fixture
def stacked():
    rng = np.random.default_rng(0)
    k, p = 7, 257
    raw = rng.uniform(0.1, 1, k)
    return rng.normal(size=(k, p)), rng.normal(-2, 1, size=(k, p)), raw / raw.sum()


def test_weighted_sum_bit_identical(stacked):
    mu, _, w = stacked
    assert np.array_equal(NB["weighted_sum"](mu, w), NP["weighted_sum"](mu, w))


def test_conflation_sums_agree(stacked):
    mu, alpha, w = stacked
    for a, b in zip(NB["conflation_sums"](mu, alpha, w), NP["conflation_sums"](mu, alpha, w)):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


def test_bin_stats_bit_identical():
    rng = np.random.default_rng(1)
    conf = rng.uniform(0, 1, 1000)
    # exact bin edges and the endpoints are the interesting cases
    conf[:11] = np.arange(11) / 10
    correct = rng.uniform(size=1000) < 0.6
    for m in (1, 7, 10, 15):
        for a, b in zip(NB["bin_stats"](conf, correct, m), NP["bin_stats"](conf, correct, m)):
            assert np.array_equal(a, b)


@pytest.mark.parametrize("impl", ["numba", "numpy"])
def test_ppa_pool_each_path_deterministic(impl):
    fn = (NB if impl == "numba" else NP)["ppa_pool"]
    mu = np.array([[0.0, 1.0], [2.0, -1.0]])
    sd = np.array([[1.0, 0.5], [2.0, 0.1]])
    counts = np.array([300, 700], dtype=np.int64)
    a = fn(mu, sd, counts, 5)
    b = fn(mu, sd, counts, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("impl", ["numba", "numpy"])
def test_ppa_pool_moments_each_path(impl):
    fn = (NB if impl == "numba" else NP)["ppa_pool"]
    n = 400_000
    mean, var = fn(np.array([[0.0], [2.0]]), np.array([[1.0], [np.sqrt(3.0)]]), np.array([n // 2, n // 2]), 9)
    assert abs(mean[0] - 1.0) < 3 * np.sqrt(3.0 / n)
    assert abs(var[0] - 3.0) < 0.03
