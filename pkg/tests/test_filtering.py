import math

import numpy as np
import pytest
from scipy.stats import chi2
from hypothesis import given, settings
from hypothesis import strategies as st

from flowfilter.autodiff import ParameterStore
from flowfilter.filtering import (
    CholeskyError,
    FilterAborted,
    GaussianBelief,
    LinearSSMParams,
    chol_solve,
    fbf_filter,
    information_form_update,
    jittered_cholesky,
    kalman_step,
    measurement_update,
    posterior_logdensity,
    sample_posterior,
    sample_run,
    state_propagate,
)
from flowfilter.flows import FlowTransform
from flowfilter.latent import FbfLatentModel

from conftest import perturb


def _spd(rng, d, floor=0.2):
    L = rng.standard_normal((d, d))
    return L @ L.T + floor * np.eye(d)


def _instance(rng, m=2, n=2):
    belief = GaussianBelief(rng.standard_normal(m), _spd(rng, m))
    C = rng.standard_normal(n)
    D = rng.standard_normal((n, m))
    Q = np.diag(rng.uniform(0.3, 2.0, n))
    gamma = C + D @ belief.mean + rng.standard_normal(n)
    return belief, gamma, C, D, Q


class _Model:
    def __init__(self, T, V, latent, mu0, Sigma0):
        self.T, self.V, self.latent, self.mu0, self.Sigma0 = T, V, latent, mu0, Sigma0


def test_uninformative_measurement_leaves_belief():
    b = GaussianBelief(np.array([1.0, -2.0]), np.array([[2.0, 0.3], [0.3, 1.0]]))
    post = measurement_update(b, np.array([5.0]), np.zeros(1), np.zeros((1, 2)), np.ones(1))
    np.testing.assert_array_equal(post.mean, b.mean)
    np.testing.assert_array_equal(post.cov, b.cov)


def test_scalar_conjugate_update():
    b = GaussianBelief([0.0], [[1.0]])
    post = measurement_update(b, [2.0], [0.0], [[1.0]], [[1.0]])
    assert post.mean[0] == pytest.approx(1.0, abs=1e-15)
    assert post.cov[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_printed_simplified_update_differs_from_exact():
    b = GaussianBelief([0.0], [[1.0]])
    post = measurement_update(b, [2.0], [0.0], [[1.0]], [[1.0]], exact=False)
    # gain Sigma D^T Q^{-1} = 1 drops the prior term from the innovation covariance
    assert post.mean[0] == pytest.approx(2.0)
    assert post.cov[0, 0] == pytest.approx(0.0)


def test_state_propagate_examples():
    b = GaussianBelief(np.array([0.5, 1.0]), np.eye(2))
    same = state_propagate(b, np.zeros(2), np.eye(2), np.zeros((2, 2)))
    np.testing.assert_array_equal(same.mean, b.mean)
    np.testing.assert_array_equal(same.cov, b.cov)
    out = state_propagate(GaussianBelief([1.0], [[1.0]]), [1.0], [[2.0]], [[3.0]])
    assert out.mean[0] == pytest.approx(3.0)
    assert out.cov[0, 0] == pytest.approx(7.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.integers(1, 4), n=st.integers(1, 4))
def test_gain_and_information_forms_agree(seed, m, n):
    rng = np.random.default_rng(seed)
    args = _instance(rng, m, n)
    a = measurement_update(*args)
    b = information_form_update(*args)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-10, rtol=1e-10)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-10, rtol=1e-10)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.integers(1, 4), n=st.integers(1, 4))
def test_conditioning_never_inflates_covariance(seed, m, n):
    rng = np.random.default_rng(seed)
    belief, gamma, C, D, Q = _instance(rng, m, n)
    post = measurement_update(belief, gamma, C, D, Q)
    assert np.min(np.linalg.eigvalsh(belief.cov - post.cov)) >= -1e-10
    np.testing.assert_array_equal(post.cov, post.cov.T)
    assert np.min(np.linalg.eigvalsh(post.cov)) >= -1e-10


def _weighted_moment_check(x, logw, mean, cov):
    w = np.exp(logw - logw.max())
    w /= w.sum()
    mu_hat = w @ x
    d = x - mu_hat
    se_mu = np.sqrt((w**2) @ (d**2))
    assert np.all(np.abs(mu_hat - mean) <= 3 * se_mu)
    for a in range(x.shape[1]):
        for b in range(a, x.shape[1]):
            prod = d[:, a] * d[:, b]
            c_hat = w @ prod
            se = np.sqrt((w**2) @ (prod - c_hat) ** 2)
            assert abs(c_hat - cov[a, b]) <= 3 * se


def test_importance_sampling_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(3):
        belief, gamma, C, D, Q = _instance(rng)
        post = measurement_update(belief, gamma, C, D, Q)
        chi = rng.multivariate_normal(belief.mean, belief.cov, size=1_000_000)
        r = gamma - C - chi @ D.T
        logw = -0.5 * np.sum(r * r / np.diag(Q), axis=1)
        _weighted_moment_check(chi, logw, post.mean, post.cov)


def test_propagation_matches_monte_carlo_pushforward():
    rng = np.random.default_rng(5)
    belief = GaussianBelief(rng.standard_normal(2), _spd(rng, 2))
    A, B, Q = rng.standard_normal(2), rng.standard_normal((2, 2)), _spd(rng, 2)
    out = state_propagate(belief, A, B, Q)
    chi = rng.multivariate_normal(belief.mean, belief.cov, size=1_000_000)
    nxt = A + chi @ B.T + rng.multivariate_normal(np.zeros(2), Q, size=chi.shape[0])
    # the two mean components are strongly correlated, so test them jointly at 3-sigma coverage
    d = nxt.mean(0) - out.mean
    stat = nxt.shape[0] * d @ np.linalg.solve(np.cov(nxt.T), d)
    assert stat <= chi2.ppf(0.9973, df=2)
    c_hat = np.cov(nxt.T)
    for a in range(2):
        for b in range(a, 2):
            prod = (nxt[:, a] - nxt[:, a].mean()) * (nxt[:, b] - nxt[:, b].mean())
            assert abs(c_hat[a, b] - out.cov[a, b]) <= 3 * prod.std() / math.sqrt(len(prod))


def test_kalman_step_pure_prediction():
    rng = np.random.default_rng(1)
    p = LinearSSMParams(
        E=rng.standard_normal(2), F=rng.standard_normal((2, 2)), G=np.zeros(1),
        H=np.zeros((1, 2)), P_chi=_spd(rng, 2), P_gamma=np.eye(1),
    )
    b = GaussianBelief(rng.standard_normal(2), _spd(rng, 2))
    out = kalman_step(b, np.array([3.0]), p)
    np.testing.assert_allclose(out.mean, p.E + p.F @ b.mean, rtol=1e-14)
    np.testing.assert_allclose(out.cov, p.F @ b.cov @ p.F.T + p.P_chi, rtol=1e-14)


def test_kalman_step_scalar_textbook():
    p = LinearSSMParams(np.zeros(1), np.eye(1), np.zeros(1), np.eye(1), np.eye(1), np.eye(1))
    out = kalman_step(GaussianBelief([0.0], [[1.0]]), [2.0], p)
    assert out.mean[0] == pytest.approx(4.0 / 3.0, abs=1e-15)
    assert out.cov[0, 0] == pytest.approx(2.0 / 3.0, abs=1e-15)


def test_kalman_step_matches_bayes_quadrature():
    E, F, G, H, Pc, Pg = 0.3, 0.8, -0.2, 1.5, 0.6, 0.4
    mu, var, gamma = 0.5, 1.2, 1.7
    p = LinearSSMParams(np.array([E]), np.array([[F]]), np.array([G]), np.array([[H]]),
                        np.array([[Pc]]), np.array([[Pg]]))
    out = kalman_step(GaussianBelief([mu], [[var]]), [gamma], p)

    g = np.linspace(-12, 12, 2401)
    prev = np.exp(-0.5 * (g - mu) ** 2 / var)
    trans = np.exp(-0.5 * (g[:, None] - E - F * g[None, :]) ** 2 / Pc)
    pred = np.trapezoid(trans * prev[None, :], g, axis=1)
    post = pred * np.exp(-0.5 * (gamma - G - H * g) ** 2 / Pg)
    post /= np.trapezoid(post, g)
    m1 = np.trapezoid(g * post, g)
    m2 = np.trapezoid((g - m1) ** 2 * post, g)
    assert abs(m1 - out.mean[0]) < 1e-4
    assert abs(m2 - out.cov[0, 0]) < 1e-4


def test_filter_with_no_measurements():
    store = ParameterStore()
    latent = FbfLatentModel(store, 2, 2, [4], np.random.default_rng(0))
    model = _Model(FlowTransform(2, []), FlowTransform(2, []), latent, np.ones(2), np.eye(2))
    run = fbf_filter(model, np.zeros((0, 2)))
    assert len(run) == 1 and run.n_steps == 0
    np.testing.assert_array_equal(run.means[0], 1.0)


def test_filter_matches_manual_recursion():
    rng = np.random.default_rng(3)
    store = ParameterStore()
    T = FlowTransform.build(store, "T", 2, 2, [8], rng)
    V = FlowTransform.build(store, "V", 2, 2, [8], rng)
    latent = FbfLatentModel(store, 2, 2, [8], rng)
    perturb(store, rng, 0.1)
    latent.D.data[:] = rng.standard_normal((2, 2))
    model = _Model(T, V, latent, np.zeros(2), np.eye(2))
    ys = rng.standard_normal((6, 2))
    run = fbf_filter(model, ys)
    belief = GaussianBelief(model.mu0, model.Sigma0)
    for k, y in enumerate(ys, start=1):
        gamma = V.forward(y[None, :])[0].data[0]
        A, Bf, Q = latent.conditioners(gamma)
        post = measurement_update(belief, gamma, latent.C.data, latent.D.data, latent.q_gamma_diag())
        belief = state_propagate(post, A.data[0], Bf.data[0].reshape(2, 2), Q.data[0])
        np.testing.assert_allclose(run.means[k], belief.mean, atol=1e-12)
        np.testing.assert_allclose(run.covs[k], belief.cov, atol=1e-12)
    assert run.step_seconds.shape == (6,)


def test_filter_aborts_on_non_finite_measurement():
    store = ParameterStore()
    latent = FbfLatentModel(store, 2, 2, [4], np.random.default_rng(0))
    model = _Model(FlowTransform(2, []), FlowTransform(2, []), latent, np.zeros(2), np.eye(2))
    ys = np.zeros((4, 2))
    ys[2, 1] = np.inf
    with pytest.raises(FilterAborted) as info:
        fbf_filter(model, ys)
    assert info.value.step == 3


def test_degenerate_belief_sampling():
    model = _Model(FlowTransform(2, []), None, None, None, None)
    b = GaussianBelief(np.array([0.4, -1.0]), np.zeros((2, 2)))
    x = sample_posterior(model, b, 50, seed=1)
    np.testing.assert_array_equal(x, np.tile(b.mean, (50, 1)))


def test_sampling_latent_moments_and_determinism():
    rng = np.random.default_rng(9)
    store = ParameterStore()
    T = FlowTransform.build(store, "T", 2, 3, [8], rng)
    perturb(store, rng, 0.1)
    model = _Model(T, None, None, None, None)
    b = GaussianBelief(np.array([1.0, -0.5]), np.array([[1.5, 0.4], [0.4, 0.8]]))
    N = 200_000
    x = sample_posterior(model, b, N, seed=7)
    np.testing.assert_array_equal(x, sample_posterior(model, b, N, seed=7))
    chi = T.forward(x)[0].data
    tol = 4 / math.sqrt(N)
    scale = np.sqrt(np.diag(b.cov))
    assert np.all(np.abs(chi.mean(0) - b.mean) <= tol * scale)
    assert np.all(np.abs(np.cov(chi.T) - b.cov) <= tol * np.outer(scale, scale) * 2)


def test_sampling_error_shrinks_like_root_n():
    b = GaussianBelief(np.zeros(2), np.eye(2))
    model = _Model(FlowTransform(2, []), None, None, None, None)
    errs = []
    for N in (1_000, 100_000):
        reps = [np.abs(sample_posterior(model, b, N, seed=s).mean(0)).mean() for s in range(20)]
        errs.append(np.mean(reps))
    assert 5 < errs[0] / errs[1] < 20


def test_sample_run_shapes_and_streams():
    model = _Model(FlowTransform(2, []), None, None, None, None)
    from flowfilter.filtering import FilterRun

    run = FilterRun(np.zeros((4, 2)), np.tile(np.eye(2), (4, 1, 1)))
    s = sample_run(model, run, 10, seed=3)
    assert s.shape == (3, 10, 2)
    assert not np.array_equal(s[0], s[1])
    np.testing.assert_array_equal(s, sample_run(model, run, 10, seed=3))


def test_posterior_logdensity_identity_is_gaussian():
    from scipy.stats import multivariate_normal

    b = GaussianBelief(np.array([0.2, 0.1]), np.array([[1.0, 0.3], [0.3, 0.5]]))
    model = _Model(FlowTransform(2, []), None, None, None, None)
    x = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_allclose(
        posterior_logdensity(model, b, x), multivariate_normal(b.mean, b.cov).logpdf(x), rtol=1e-12
    )


def test_posterior_density_normalizes_and_matches_samples():
    rng = np.random.default_rng(11)
    store = ParameterStore()
    T = FlowTransform.build(store, "T", 2, 3, [8], rng)
    perturb(store, rng, 0.1)
    model = _Model(T, None, None, None, None)
    b = GaussianBelief(np.array([0.3, -0.2]), np.array([[0.8, 0.2], [0.2, 0.6]]))
    g = np.linspace(-10, 10, 501)
    xx, yy = np.meshgrid(g, g)
    dens = np.exp(posterior_logdensity(model, b, np.column_stack([xx.ravel(), yy.ravel()]))).reshape(xx.shape)
    assert np.trapezoid(np.trapezoid(dens, g, axis=1), g) == pytest.approx(1.0, abs=1e-2)

    # KS-type check on the first coordinate: marginal CDF from quadrature vs empirical CDF
    marg = np.trapezoid(dens, g, axis=0)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (marg[1:] + marg[:-1]) * np.diff(g))])
    cdf /= cdf[-1]
    N = 20_000
    draws = np.sort(sample_posterior(model, b, N, seed=4)[:, 0])
    ecdf = np.arange(1, N + 1) / N
    assert np.max(np.abs(np.interp(draws, g, cdf) - ecdf)) < 1.63 / math.sqrt(N) + 5e-3


def test_jittered_cholesky_handles_semidefinite():
    S = np.array([[1.0, 1.0], [1.0, 1.0]])
    L = jittered_cholesky(S)
    np.testing.assert_allclose(L @ L.T, S, atol=1e-6)
    with pytest.raises(CholeskyError):
        jittered_cholesky(-np.eye(2))
    np.testing.assert_allclose(chol_solve(np.diag([2.0, 4.0]), np.array([2.0, 2.0])), [1.0, 0.5])
