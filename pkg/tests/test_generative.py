import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from disentangle.generative import (
    MixingModel,
    data_covariance,
    ground_truth_posterior,
    linear_gaussian_posterior,
    sample_data,
)


def regress(S, X):
    C = np.cov(np.hstack([S, X]).T)
    k = S.shape[1]
    F = np.linalg.solve(C[k:, k:], C[:k, k:].T).T
    return F, C[:k, :k] - F @ C[:k, k:].T


def test_mixing_model_validation():
    with pytest.raises(ValueError):
        MixingModel(np.ones((1, 2)))
    with pytest.raises(ValueError):
        MixingModel(np.array([[np.nan]]))
    m = MixingModel.paper()
    assert (m.N, m.k) == (128, 2)
    assert m.A[0, 0] == 1.0 and m.A[0, 1] == 0.5 and m.A[5, 1] == 0.5
    with pytest.raises(ValueError):
        m.A[0, 0] = 3.0


def test_data_covariance_examples():
    np.testing.assert_array_equal(data_covariance(MixingModel(np.zeros((3, 1)))), np.eye(3))
    np.testing.assert_allclose(data_covariance(MixingModel(np.array([[1.0]]))), [[2.0]])
    S = data_covariance(MixingModel.paper(6, 2))
    np.testing.assert_allclose(np.diag(S)[:2], 2.25)


def test_data_covariance_against_samples():
    _, X = sample_data(MixingModel(np.array([[1.0]])), 1_000_000, 0)
    assert abs(X.var() - 2.0) < 1e-2
    _, X = sample_data(MixingModel.paper(4, 2), 1_000_000, 0)
    np.testing.assert_allclose(np.cov(X.T), data_covariance(MixingModel.paper(4, 2)), atol=2e-2)


@pytest.mark.parametrize("seed", range(5))
def test_sample_covariance_within_standard_errors(seed):
    m = MixingModel.random(3, 2, seed)
    n = 100_000
    _, X = sample_data(m, n, seed)
    Sigma = data_covariance(m)
    emp = X.T @ X / n
    # var of x_i x_j under a zero-mean Gaussian is S_ii S_jj + S_ij^2
    se = np.sqrt((np.outer(np.diag(Sigma), np.diag(Sigma)) + Sigma**2) / n)
    assert np.all(np.abs(emp - Sigma) < 4 * se)


def test_posterior_examples():
    post = ground_truth_posterior(MixingModel(np.zeros((3, 2))))
    np.testing.assert_array_equal(post.F, 0.0)
    np.testing.assert_allclose(post.E, np.eye(2))
    post = ground_truth_posterior(MixingModel(np.array([[2.0]])))
    np.testing.assert_allclose(post.F, [[0.4]])
    np.testing.assert_allclose(post.E, [[0.2]])
    post = ground_truth_posterior(MixingModel(np.eye(3)))
    np.testing.assert_allclose(post.F, 0.5 * np.eye(3))
    np.testing.assert_allclose(post.E, 0.5 * np.eye(3))


@pytest.mark.parametrize("A", [np.array([[2.0]]), np.eye(2)])
def test_posterior_against_regression(A):
    m = MixingModel(A)
    S, X = sample_data(m, 1_000_000, 1)
    F, E = regress(S, X)
    post = ground_truth_posterior(m)
    np.testing.assert_allclose(F, post.F, atol=1e-2)
    np.testing.assert_allclose(E, post.E, atol=1e-2)


@given(st.integers(0, 2**32), st.integers(1, 6), st.integers(1, 3))
def test_posterior_algebra(seed, N, k):
    k = min(k, N)
    m = MixingModel.random(N, k, seed)
    post = ground_truth_posterior(m)
    np.testing.assert_allclose(post.E, np.eye(k) - post.F @ m.A, atol=1e-10)
    np.testing.assert_allclose(post.E, post.E.T, atol=1e-15)
    assert np.all(np.linalg.eigvalsh(post.E) > 0)
    same = linear_gaussian_posterior(m.A)
    np.testing.assert_array_equal(same.F, post.F)


def test_sample_data_determinism_and_decoupling():
    m = MixingModel(np.zeros((2, 1)))
    S1, X1 = sample_data(m, 1, 5)
    S2, X2 = sample_data(m, 1, 5)
    assert np.array_equal(S1, S2) and np.array_equal(X1, X2)
    assert X1.shape == (1, 2) and S1.shape == (1, 1)
    _, X3 = sample_data(m, 1, 6)
    assert not np.array_equal(X1, X3)
