import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from disentangle import rng
from disentangle.checks import fd_relative_error, random_params
from disentangle.generative import MixingModel, data_covariance, ground_truth_posterior, sample_data
from disentangle.linear_bvae import (
    LinearVaeParams,
    SolverConfig,
    apply_gauge,
    canonicalize,
    encode,
    gradient_ascent,
    integrated_loss,
    loss_gradient,
    model_posterior,
    optimal_bsigma,
    solve_stationary,
    stationarity_residual,
)

LOG_2PI = np.log(2 * np.pi)
SCALAR = MixingModel(np.array([[1.0]]))


def test_params_validation_and_flatten_roundtrip():
    p = random_params(3, 2, rng.stream(0, "p"))
    assert (p.N, p.k) == (3, 2)
    q = p.unflatten(p.flatten())
    for a, b in zip(p.blocks(), q.blocks()):
        assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        p.replace(D=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        p.replace(bmu=np.array([np.inf, 0.0]))
    with pytest.raises(ValueError):
        LinearVaeParams(**{**{n: b for n, b in zip(("Wmu", "bmu", "Wsigma", "bsigma", "D", "bD"), p.blocks())},
                           "sigma_y2": 2.0})


def test_encode_examples():
    q = encode(LinearVaeParams.zeros(3, 2), np.array([1.0, -2.0, 3.0]))
    np.testing.assert_array_equal(q.mean, 0.0)
    np.testing.assert_array_equal(q.cov, np.eye(2))
    p = LinearVaeParams.zeros(3, 2).replace(bsigma=-np.log(2.0) * np.ones(2))
    np.testing.assert_allclose(encode(p, np.array([5.0, 1.0, 0.0])).cov, 0.5 * np.eye(2))
    p = LinearVaeParams.zeros(1, 1).replace(Wmu=np.array([[0.5]]), bsigma=np.array([-np.log(2.0)]))
    q = encode(p, np.array([2.0]))
    assert q.mean[0] == 1.0 and q.cov[0, 0] == pytest.approx(0.5)


def test_integrated_loss_examples():
    Sigma = data_covariance(SCALAR)
    zero = LinearVaeParams.zeros(1, 1)
    assert integrated_loss(zero, Sigma, 1.0) == pytest.approx(-1.5, abs=1e-14)
    assert integrated_loss(zero, Sigma, 2.0) == pytest.approx(-2.0, abs=1e-14)
    with pytest.raises(ValueError):
        integrated_loss(zero, Sigma, 0.0)


def mc_objective(p, m, beta, n, seed):
    """Sampled E[log N(x; Dz + bD, I) - beta KL(q || N(0, I))] with z drawn from q."""
    _, X = sample_data(m, n, seed)
    g = rng.stream(seed, "mc_objective")
    mu = X @ p.Wmu.T + p.bmu
    logvar = X @ p.Wsigma.T + p.bsigma
    z = mu + np.exp(0.5 * logvar) * rng.normal(g, mu.shape)
    resid = X - z @ p.D.T - p.bD
    rec = -0.5 * (m.N * LOG_2PI + np.sum(resid**2, axis=1))
    kl = 0.5 * np.sum(np.exp(logvar) + mu**2 - 1 - logvar, axis=1)
    return float(np.mean(rec - beta * kl))


@pytest.mark.parametrize("beta,expected", [(1.0, -1.5), (2.0, -2.0)])
def test_integrated_loss_matches_sampled_objective_at_zero(beta, expected):
    est = mc_objective(LinearVaeParams.zeros(1, 1), SCALAR, beta, 1_000_000, 0)
    # the integrated form drops -N/2 ln 2 pi and +beta k / 2
    assert est + 0.5 * LOG_2PI - beta * 0.5 == pytest.approx(expected, abs=5e-3)


def test_integrated_loss_matches_sampled_objective_generic():
    m = MixingModel.random(3, 2, 4)
    p = random_params(3, 2, rng.stream(4, "generic"))
    beta = 0.7
    est = mc_objective(p, m, beta, 1_000_000, 2)
    closed = integrated_loss(p, data_covariance(m), beta) - 1.5 * LOG_2PI + beta * 1.0
    assert est == pytest.approx(closed, abs=2e-2)


def test_beta_enters_affinely():
    Sigma = data_covariance(MixingModel.random(4, 2, 1))
    p = random_params(4, 2, rng.stream(1, "affine"))
    L1, L2, L3 = (integrated_loss(p, Sigma, b) for b in (1.0, 2.0, 3.0))
    assert L3 - L2 == pytest.approx(L2 - L1, abs=1e-10)


def test_gradient_against_finite_differences():
    g = rng.stream(0, "fd_points")
    for N, k in ((6, 2), (3, 1), (5, 3)):
        m = MixingModel.random(N, k, N * 10 + k)
        Sigma = data_covariance(m)
        for _ in range(20):
            blocks = {n: 0.1 * rng.normal(g, b.shape) for n, b in
                      zip(("Wmu", "bmu", "Wsigma", "bsigma", "D", "bD"), LinearVaeParams.zeros(N, k).blocks())}
            p = LinearVaeParams(**blocks)
            beta = float(np.exp(rng.normal(g, 1)[0]))
            grad = loss_gradient(p, Sigma, beta).flatten()
            err = fd_relative_error(lambda v: integrated_loss(p.unflatten(v), Sigma, beta), p.flatten(), grad,
                                    h=1e-5)
            assert err < 1e-6


def test_gradient_vanishes_for_biases_at_zero():
    g = loss_gradient(LinearVaeParams.zeros(4, 2), data_covariance(MixingModel.random(4, 2, 0)), 1.0)
    assert not g.bmu.any() and not g.bD.any()


@given(st.integers(0, 2**32), st.integers(0, 1), st.floats(0.1, 10))
def test_sign_flip_leaves_loss_unchanged(seed, j, beta):
    m = MixingModel.random(4, 2, seed)
    Sigma = data_covariance(m)
    p = random_params(4, 2, rng.stream(seed, "gauge")).replace(bmu=np.zeros(2))
    signs = np.ones(2)
    signs[j] = -1.0
    q = apply_gauge(p, (0, 1), signs)
    assert integrated_loss(q, Sigma, beta) == pytest.approx(integrated_loss(p, Sigma, beta), rel=1e-13)
    r = apply_gauge(p, (1, 0), (1.0, 1.0))
    assert integrated_loss(r, Sigma, beta) == pytest.approx(integrated_loss(p, Sigma, beta), rel=1e-13)


@given(st.integers(0, 2**32), st.floats(0.05, 20))
def test_optimal_bsigma_zeroes_its_gradient(seed, beta):
    m = MixingModel.random(5, 2, seed)
    p = random_params(5, 2, rng.stream(seed, "bsig")).replace(Wsigma=np.zeros((2, 5)))
    p = p.replace(bsigma=optimal_bsigma(p.D, beta))
    assert np.max(np.abs(loss_gradient(p, data_covariance(m), beta).bsigma)) < 1e-12


def test_model_posterior_examples():
    post = model_posterior(LinearVaeParams.zeros(3, 2))
    np.testing.assert_array_equal(post.F, 0.0)
    np.testing.assert_allclose(post.E, np.eye(2))
    m = MixingModel.random(4, 2, 3)
    post = model_posterior(LinearVaeParams.zeros(4, 2).replace(D=m.A))
    truth = ground_truth_posterior(m)
    np.testing.assert_allclose(post.F, truth.F, atol=1e-14)
    np.testing.assert_allclose(post.E, truth.E, atol=1e-14)
    post = model_posterior(LinearVaeParams.zeros(1, 1).replace(D=np.ones((1, 1))))
    np.testing.assert_allclose(post.F, [[0.5]])
    np.testing.assert_allclose(post.E, [[0.5]])
    with pytest.raises(ValueError):
        model_posterior(LinearVaeParams.zeros(1, 1).replace(bD=np.ones(1)))


def test_scalar_optimum():
    sp = solve_stationary(SCALAR, 1.0, SolverConfig())
    p = sp.params
    assert sp.converged and sp.residual < 1e-9
    assert abs(p.D[0, 0]) == pytest.approx(1.0, abs=1e-9)
    assert abs(p.Wmu[0, 0]) == pytest.approx(0.5, abs=1e-9)
    assert p.bsigma[0] == pytest.approx(-np.log(2.0), abs=1e-9)
    # canonical sign is positive
    assert p.D[0, 0] > 0 and p.Wmu[0, 0] > 0


def test_degenerate_root_has_lower_loss():
    Sigma = data_covariance(SCALAR)
    collapsed = LinearVaeParams.zeros(1, 1)
    best = solve_stationary(SCALAR, 1.0).params
    assert integrated_loss(best, Sigma, 1.0) > integrated_loss(collapsed, Sigma, 1.0)


def test_zero_mixing_collapses_to_prior():
    # with A = 0 the collapsed encoder is the optimum only for beta >= 1;
    # beta = 1 itself is critically slow, so test above it
    sp = solve_stationary(MixingModel(np.zeros((3, 1))), 2.0)
    assert sp.converged
    assert np.max(np.abs(sp.params.D)) < 1e-6
    assert np.max(np.abs(sp.params.Wmu)) < 1e-6
    assert np.max(np.abs(sp.params.bsigma)) < 1e-6


@pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
def test_reduced_and_full_modes_agree(beta):
    m = MixingModel.random(8, 2, 11)
    red = solve_stationary(m, beta, SolverConfig(mode="reduced", restarts=4))
    full = solve_stationary(m, beta, SolverConfig(mode="full", restarts=4))
    assert red.converged and full.converged
    assert full.loss == pytest.approx(red.loss, abs=1e-7)
    assert np.max(np.abs(full.params.Wsigma)) < 1e-6


def test_solver_trace_is_monotone():
    m = MixingModel.random(6, 2, 2)
    sp = solve_stationary(m, 0.8, SolverConfig(restarts=1), record_trace=True)
    trace = np.asarray(sp.trace)
    assert trace.size > 1
    noise = 64 * np.finfo(float).eps * (1 + np.abs(trace[:-1]))
    assert np.all(np.diff(trace) >= -noise)


def test_plain_gradient_ascent_on_quadratic():
    target = np.array([1.0, -2.0])

    def evaluate(x):
        g = -(x - target)
        return -0.5 * float((x - target) @ (x - target)), g, g

    x, f, res, it = gradient_ascent(evaluate, np.zeros(2), 1e-12, 100)
    np.testing.assert_allclose(x, target, atol=1e-12)
    assert res <= 1e-12


def test_stationarity_residual_at_solution():
    m = MixingModel.random(5, 2, 7)
    sp = solve_stationary(m, 1.3)
    assert stationarity_residual(sp.params, data_covariance(m), 1.3) == pytest.approx(sp.residual)
    assert sp.residual <= SolverConfig().grad_tol


def test_canonicalize_is_idempotent_and_gauge_free():
    p = random_params(5, 3, rng.stream(9, "canon"))
    c = canonicalize(p)
    c2 = canonicalize(apply_gauge(p, (2, 0, 1), (-1.0, 1.0, -1.0)))
    for a, b in zip(c.blocks(), c2.blocks()):
        np.testing.assert_allclose(a, b, atol=1e-15)
    norms = np.linalg.norm(c.D, axis=0)
    assert np.all(np.diff(norms) <= 0)


def test_fixed_decoder_mode_requires_decoder():
    with pytest.raises(ValueError):
        solve_stationary(SCALAR, 1.0, SolverConfig(mode="fixed_decoder"))
    sp = solve_stationary(SCALAR, 1.0, SolverConfig(mode="fixed_decoder"), decoder=np.ones((1, 1)))
    assert sp.params.D[0, 0] == 1.0
    assert sp.params.Wmu[0, 0] == pytest.approx(0.5, abs=1e-9)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(mode="other")
    with pytest.raises(ValueError):
        SolverConfig(restarts=0)
    with pytest.raises(ValueError):
        solve_stationary(SCALAR, -1.0)
