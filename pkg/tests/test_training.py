import math

import numpy as np
import pytest

from flowfilter import autodiff as ad
from flowfilter.autodiff import Tape
from flowfilter.flows import FlowTransform
from flowfilter.latent import f_o, f_s
from flowfilter.systems import LinearGaussianSSM, simulate_linear
from flowfilter.training import (
    Adam,
    InitialBeliefParams,
    ModelConfig,
    TrainConfig,
    TrainingDiverged,
    build_model,
    clip_by_global_norm,
    estimate_initial_belief,
    initial_distribution_loss,
    lr_schedule,
    minibatch_objective,
    objective_tensor,
    sample_triples,
    train,
)

from conftest import SMALL, perturb, small_model as _small_model


def _batch(seed=1, size=5):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((size, 2)), rng.standard_normal((size, 2)), rng.standard_normal((size, 2))


def test_lr_schedule_examples():
    assert lr_schedule(0, 5e-4, 0.1, 500) == 5e-4
    assert lr_schedule(500, 5e-4, 0.1, 500) == pytest.approx(5e-5, rel=1e-14)
    assert lr_schedule(250, 5e-4, 0.1, 500) == pytest.approx(1.581e-4, rel=1e-3)


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.alpha, cfg.beta, cfg.decay) == (500, 64, 5e-4, 1.0, 1.0, 0.1)
    mc = ModelConfig()
    assert (mc.flow_blocks, mc.flow_layers, mc.flow_units) == (6, 3, 64)


@pytest.mark.parametrize(
    "kwargs",
    [dict(alpha=0.0), dict(beta=-1.0), dict(lr=0.0), dict(decay=0.0), dict(decay=1.5), dict(batch_size=0)],
)
def test_invalid_train_config(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_invalid_model_config():
    with pytest.raises(ValueError):
        ModelConfig(variant="rkn")
    with pytest.raises(ValueError):
        ModelConfig(state_dim=1)


@pytest.mark.parametrize("variant", ["fbf", "fbf_prime"])
def test_objective_gradient(variant):
    model = _small_model(variant)
    xp, x, y = _batch()

    def fn():
        return objective_tensor(model, xp, x, y, alpha=0.7, beta=1.3)

    assert ad.grad_check(fn, model.store, h=1e-5) < 1e-4


def test_objective_is_weighted_mean_of_densities():
    model = _small_model()
    xp, x, y = _batch(size=4)
    value, _ = minibatch_objective(model, xp, x, y, alpha=2.0, beta=0.5)
    fs = f_s(model.latent, model.T, model.V, xp, x, y).data
    fo = f_o(model.latent, model.T, model.V, xp, y).data
    assert value == pytest.approx(2.0 * fs.mean() + 0.5 * fo.mean(), rel=1e-14)


def test_batch_of_identical_triples_equals_single():
    model = _small_model()
    xp, x, y = _batch(size=1)
    single, _ = minibatch_objective(model, xp, x, y)
    rep, _ = minibatch_objective(model, np.repeat(xp, 7, 0), np.repeat(x, 7, 0), np.repeat(y, 7, 0))
    assert rep == pytest.approx(single, rel=1e-13)


def test_batch_size_one_is_density_sum():
    model = _small_model()
    xp, x, y = _batch(size=1)
    value, _ = minibatch_objective(model, xp, x, y)
    fs = f_s(model.latent, model.T, model.V, xp, x, y).data[0]
    fo = f_o(model.latent, model.T, model.V, xp, y).data[0]
    assert value == fs + fo


def test_minibatch_gradients_descend_negative_objective():
    model = _small_model()
    xp, x, y = _batch()
    _, grads = minibatch_objective(model, xp, x, y)
    with Tape() as tape:
        objective_tensor(model, xp, x, y)
    up = tape.backward()
    for name in grads:
        np.testing.assert_allclose(grads[name], -up[name], rtol=1e-14, atol=0)


def test_two_point_initial_belief():
    T = FlowTransform(2, [])
    mu, cov = estimate_initial_belief(T, np.array([[0.0, 0.0], [2.0, 0.0]]))
    np.testing.assert_allclose(mu, [1.0, 0.0])
    np.testing.assert_allclose(cov, np.diag([2.0, 0.0]) + 1e-4 * np.eye(2), rtol=1e-14)


def test_deterministic_initial_state_gives_ridge():
    T = FlowTransform(3, [])
    x0 = np.tile([0.0, 0.5, 1.0], (10, 1))
    mu, cov = estimate_initial_belief(T, x0)
    np.testing.assert_array_equal(mu, x0[0])
    np.testing.assert_allclose(cov, 1e-4 * np.eye(3), atol=1e-18)
    _, single = estimate_initial_belief(T, x0[:1])
    np.testing.assert_array_equal(single, 1e-4 * np.eye(3))


def test_initial_belief_recovers_gaussian_and_ignores_order():
    rng = np.random.default_rng(0)
    mu_true = np.array([1.0, -2.0])
    cov_true = np.array([[2.0, 0.6], [0.6, 1.0]])
    N = 200_000
    x0 = rng.multivariate_normal(mu_true, cov_true, size=N)
    T = FlowTransform(2, [])
    mu, cov = estimate_initial_belief(T, x0)
    se = np.sqrt(np.diag(cov_true) / N)
    assert np.all(np.abs(mu - mu_true) < 4 * se)
    se_cov = np.sqrt((np.outer(np.diag(cov_true), np.diag(cov_true)) + cov_true**2) / N)
    assert np.all(np.abs(cov - 1e-4 * np.eye(2) - cov_true) < 4 * se_cov)
    mu2, cov2 = estimate_initial_belief(T, x0[rng.permutation(N)])
    np.testing.assert_allclose(mu2, mu, rtol=1e-12)
    np.testing.assert_allclose(cov2, cov, rtol=1e-12)


def test_initial_distribution_loss_examples():
    from scipy.stats import multivariate_normal

    model = _small_model(scale=0.0)
    init = InitialBeliefParams(model.store, 2)
    init.s0.data[:] = math.log(math.e - 1.0)  # softplus -> 1
    single = initial_distribution_loss(model.T, np.zeros((1, 2)), init.mu0, init.s0).data
    assert float(single) == pytest.approx(-math.log(2 * math.pi), abs=1e-14)

    x0 = np.random.default_rng(0).standard_normal((50, 2))
    init.mu0.data[:] = x0.mean(0)
    val = float(initial_distribution_loss(model.T, x0, init.mu0, init.s0).data)
    assert val == pytest.approx(multivariate_normal(x0.mean(0), np.eye(2)).logpdf(x0).mean(), rel=1e-12)


def test_initial_distribution_loss_gradient():
    model = _small_model()
    init = InitialBeliefParams(model.store, 2)
    perturb(model.store, np.random.default_rng(3), 0.2, prefix="init")
    x0 = np.random.default_rng(4).standard_normal((6, 2))
    assert ad.grad_check(lambda: initial_distribution_loss(model.T, x0, init.mu0, init.s0), model.store) < 1e-4


def test_sample_triples_are_consecutive():
    states = np.arange(2 * 4 * 2, dtype=float).reshape(2, 4, 2)
    meas = 1000 + states[:, 1:]
    xp, x, y = sample_triples(states, meas, 200, np.random.default_rng(0))
    np.testing.assert_array_equal(x - xp, 2.0)
    np.testing.assert_array_equal(y - x, 1000.0)
    # every (trajectory, time) pair is reachable
    assert len({tuple(r) for r in xp}) == 6


def test_adam_first_step_and_clipping():
    p = ad.Tensor(np.array([1.0, -1.0]), name="p", trainable=True)
    opt = Adam([p])
    opt.step([np.array([3.0, -0.01])], lr=0.1)
    np.testing.assert_allclose(p.data, [0.9, -0.9], rtol=1e-6)
    g, norm = clip_by_global_norm([np.array([3.0, 4.0]), np.array([0.0])], 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(g[0], [0.6, 0.8])


def _sin_data(N=4, K=10, seed=0):
    from flowfilter.systems import simulate_sinusoidal

    return simulate_sinusoidal(0.1, 0.05, K=K, N=N, seed=seed)


def test_zero_epochs_only_estimates_belief():
    ds = _sin_data()
    mc = ModelConfig(state_dim=2, obs_dim=2, **SMALL)
    model = train(ds.states, ds.measurements, mc, TrainConfig(epochs=0))
    assert model.history == []
    mu, cov = estimate_initial_belief(model.T, ds.states[:, 0])
    np.testing.assert_array_equal(model.mu0, mu)
    np.testing.assert_array_equal(model.Sigma0, cov)


def test_seeded_training_is_bit_identical():
    ds = _sin_data()
    mc = ModelConfig(state_dim=2, obs_dim=2, **SMALL)
    cfg = TrainConfig(epochs=15, batch_size=8, seed=42)
    a = train(ds.states, ds.measurements, mc, cfg)
    b = train(ds.states, ds.measurements, mc, cfg)
    assert a.history == b.history
    for name, t in a.store.items():
        assert t.data.tobytes() == b.store[name].data.tobytes()
    c = train(ds.states, ds.measurements, mc, TrainConfig(epochs=15, batch_size=8, seed=43))
    assert c.history != a.history


def test_training_improves_smoothed_objective():
    ds = _sin_data(N=20, K=20)
    mc = ModelConfig(state_dim=2, obs_dim=2, **SMALL)
    model = train(ds.states, ds.measurements, mc, TrainConfig(epochs=300, batch_size=32, lr=5e-3, seed=1))
    obj = np.array([h[1] for h in model.history])
    assert obj[-50:].mean() > obj[:50].mean()
    lrs = [h[2] for h in model.history]
    assert lrs[0] == 5e-3 and lrs[-1] < lrs[0]


def test_training_rejects_bad_data():
    mc = ModelConfig(state_dim=2, obs_dim=2, **SMALL)
    with pytest.raises(ValueError):
        train(np.zeros((0, 3, 2)), np.zeros((0, 2, 2)), mc, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(np.zeros((1, 3, 2)), np.zeros((1, 3, 2)), mc, TrainConfig(epochs=1))


def test_divergence_reports_partial_history():
    ds = _sin_data()
    mc = ModelConfig(state_dim=2, obs_dim=2, **SMALL)
    bad = ds.states.copy()
    bad[:, 1:] = 1e200
    with pytest.raises(TrainingDiverged) as info:
        train(bad, ds.measurements, mc, TrainConfig(epochs=5, batch_size=4))
    assert info.value.iteration == 0
    assert info.value.history == []


@pytest.mark.slow
def test_recovers_linear_measurement_predictor():
    ssm = LinearGaussianSSM(
        F=[[0.8, 0.0], [0.0, 0.5]], b=[0.5, -0.3], Q=np.diag([0.5, 0.4]),
        H=[[1.0, 0.0], [0.0, 2.0]], c=[0.2, 0.1], R=np.diag([0.3, 0.2]),
        mu0=[0.0, 0.0], Sigma0=np.eye(2),
    )
    ds = simulate_linear(ssm, K=50, N=40, seed=0)
    mc = ModelConfig(state_dim=2, obs_dim=2, flow_blocks=0, standardize=False, cond_layers=1, cond_units=8)
    model = build_model(mc, np.random.default_rng(0))
    model.store.set_trainable("T", False)
    model.store.set_trainable("V", False)
    train(ds.states, ds.measurements, mc, TrainConfig(epochs=2000, batch_size=64, lr=2e-2, seed=0), model=model)
    C_true = ssm.H @ ssm.b + ssm.c
    D_true = ssm.H @ ssm.F
    assert np.max(np.abs(model.latent.C.data - C_true)) < 0.1
    assert np.max(np.abs(model.latent.D.data - D_true)) < 0.1
