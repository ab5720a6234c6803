import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowfilter.metrics import MetricReport, crps, mmd, rmse


def naive_rmse(truth, samples):
    K, N, m = samples.shape
    total = 0.0
    for k in range(K):
        for i in range(m):
            mean = 0.0
            for j in range(N):
                mean += samples[k, j, i]
            mean /= N
            total += (truth[k, i] - mean) ** 2
    return math.sqrt(total / (m * K))


def naive_mmd(truth, samples, sigma=2.0):
    K, N, _ = samples.shape

    def ker(a, b):
        return math.exp(-float(np.sum((a - b) ** 2)) / (2 * sigma**2))

    total = 0.0
    for k in range(K):
        within = sum(ker(samples[k, i], samples[k, j]) for i in range(N) for j in range(N)) / N**2
        cross = sum(ker(samples[k, j], truth[k]) for j in range(N)) / N
        total += within - 2 * cross + ker(truth[k], truth[k])
    return total / K


def quadrature_crps(truth, samples, grid_points=20001):
    K, N, m = samples.shape
    total = 0.0
    for k in range(K):
        for i in range(m):
            xs, t = samples[k, :, i], truth[k, i]
            pooled = np.append(xs, t)
            spread = max(pooled.std(), 1.0)
            lo, hi = pooled.min() - 10 * spread, pooled.max() + 10 * spread
            # the integrand is piecewise constant, so bracket every jump with nodes
            eps = 1e-12 * max(1.0, np.abs(pooled).max())
            x = np.unique(np.concatenate([np.linspace(lo, hi, grid_points), pooled - eps, pooled + eps]))
            ecdf = (xs[None, :] < x[:, None]).mean(axis=1)
            f = ((t < x).astype(float) - ecdf) ** 2
            total += np.trapezoid(f, x)
    return total / (m * K)


def _data(seed, K=4, N=25, m=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((K, m)), rng.standard_normal((K, N, m)) * 1.5 + 0.3


def test_zero_when_samples_equal_truth():
    truth = np.random.default_rng(0).standard_normal((5, 2))
    samples = np.repeat(truth[:, None, :], 7, axis=1)
    assert rmse(truth, samples) == pytest.approx(0.0, abs=1e-15)
    assert mmd(truth, samples) == pytest.approx(0.0, abs=1e-15)
    assert crps(truth, samples) == pytest.approx(0.0, abs=1e-15)


def test_scalar_examples():
    assert rmse(np.zeros((1, 1)), np.full((1, 3, 1), 2.0)) == 2.0
    d = 1.7
    assert mmd(np.zeros((1, 1)), np.full((1, 1, 1), d)) == pytest.approx(2 - 2 * math.exp(-d * d / 8), rel=1e-14)
    assert mmd(np.zeros((1, 1)), np.full((1, 1, 1), 1e3)) == pytest.approx(2.0)
    assert crps(np.zeros((1, 1)), np.full((1, 1, 1), -d)) == pytest.approx(d, rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_against_naive_references(seed):
    truth, samples = _data(seed)
    assert abs(rmse(truth, samples) - naive_rmse(truth, samples)) < 1e-12
    assert abs(mmd(truth, samples) - naive_mmd(truth, samples)) < 1e-12
    assert abs(mmd(truth, samples, 0.7) - naive_mmd(truth, samples, 0.7)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_crps_matches_integral_definition(seed):
    truth, samples = _data(seed, K=3, N=15, m=2)
    assert abs(crps(truth, samples) - quadrature_crps(truth, samples)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-50, 50))
def test_invariances(seed, shift):
    truth, samples = _data(seed, K=2, N=12, m=2)
    perm = np.random.default_rng(seed).permutation(12)
    for f in (rmse, mmd, crps):
        assert f(truth, samples[:, perm]) == pytest.approx(f(truth, samples), rel=1e-12, abs=1e-14)
    for f in (mmd, crps):
        assert f(truth + shift, samples + shift) == pytest.approx(f(truth, samples), rel=1e-9, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_ranges(seed):
    truth, samples = _data(seed, K=2, N=8, m=2)
    samples = samples * 4
    for f in (rmse, crps):
        assert f(truth, samples) >= 0
    assert 0 <= mmd(truth, samples) <= 2


def test_shape_errors():
    with pytest.raises(ValueError):
        rmse(np.zeros((3, 2)), np.zeros((4, 5, 2)))
    with pytest.raises(ValueError):
        crps(np.zeros((3, 2)), np.zeros((3, 0, 2)))
    with pytest.raises(ValueError):
        mmd(np.zeros((3, 2)), np.zeros((3, 5, 2)), bandwidth=0.0)


def test_report_aggregates():
    rep = MetricReport()
    for seed in range(3):
        rep.add(*_data(seed))
    s = rep.summary()
    assert set(s) == {"rmse", "mmd", "crps"}
    assert s["rmse"]["mean"] == pytest.approx(np.mean(rep.rmse))
    assert s["crps"]["std"] == pytest.approx(np.std(rep.crps))
    only = MetricReport()
    only.add(*_data(0), metrics=("rmse",))
    assert set(only.summary()) == {"rmse"}
    assert only.to_dict()["per_trajectory"]["mmd"] == []
