"""Reference filters: bootstrap particle filter and the classical Kalman filter."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .filtering import GaussianBelief, chol_solve, symmetrize
from .systems import LinearGaussianSSM, SSMInterface

log = logging.getLogger(__name__)


@dataclass
class ParticleCloud:
    particles: np.ndarray  # (N, m)
    weights: np.ndarray  # (N,), sums to one
    step: int
    ess: float
    resampled: bool = False
    degenerate: bool = False

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    def var(self) -> np.ndarray:
        d = self.particles - self.mean()
        return self.weights @ (d * d)


def ess(weights) -> float:
    """Effective sample size ``1 / sum(w^2)`` of normalized weights."""
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with one uniform offset and ``N`` evenly spaced pointers."""
    N = weights.shape[0]
    positions = (rng.random() + np.arange(N)) / N
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side="right")


def pf_filter(
    ssm: SSMInterface, ys, N: int, seed, threshold: float = 0.5
) -> list[ParticleCloud]:
    """Bootstrap SIR filter; resamples systematically when ESS < threshold * N.

    Returns one weighted cloud per measurement (the state before any
    resampling triggered at that step).
    """
    if N < 2:
        raise ValueError("need at least two particles")
    ys = np.asarray(ys, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = ssm.sample_initial(N, rng)
    logw = np.full(N, -np.log(N))
    clouds: list[ParticleCloud] = []
    for k, y in enumerate(ys, start=1):
        x = ssm.sample_transition(x, rng)
        logw = logw + ssm.log_likelihood(y, x)
        degenerate = False
        norm = logsumexp(logw)
        if not np.isfinite(norm):
            log.warning("step %d: particle weights degenerate, resetting to uniform", k)
            logw = np.full(N, -np.log(N))
            norm = 0.0
            degenerate = True
        logw = logw - norm
        w = np.exp(logw)
        w /= w.sum()
        n_eff = ess(w)
        cloud = ParticleCloud(x.copy(), w, k, n_eff, degenerate=degenerate)
        if n_eff < threshold * N:
            idx = systematic_resample(w, rng)
            x = x[idx]
            logw = np.full(N, -np.log(N))
            cloud.resampled = True
        else:
            logw = np.log(w)
        clouds.append(cloud)
    return clouds


def cloud_samples(clouds: list[ParticleCloud], n: int, seed) -> np.ndarray:
    """Equally weighted draws (K, n, m) from each cloud via systematic resampling."""
    if not clouds:
        return np.zeros((0, n, 0))
    streams = np.random.SeedSequence(seed).spawn(len(clouds))
    out = []
    for cloud, s in zip(clouds, streams):
        rng = np.random.default_rng(s)
        if n == cloud.particles.shape[0]:
            idx = systematic_resample(cloud.weights, rng)
        else:
            idx = rng.choice(cloud.particles.shape[0], size=n, p=cloud.weights)
        out.append(cloud.particles[idx])
    return np.stack(out)


def kalman_filter(ssm: LinearGaussianSSM, ys) -> list[GaussianBelief]:
    """Predict/update recursion; entry 0 is the prior, entry k the filter at k."""
    ys = np.asarray(ys, dtype=np.float64).reshape(-1, ssm.n)
    belief = GaussianBelief(ssm.mu0.copy(), ssm.Sigma0.copy())
    out = [belief]
    I = np.eye(ssm.m)
    for y in ys:
        mean = ssm.F @ belief.mean + ssm.b
        cov = ssm.F @ belief.cov @ ssm.F.T + ssm.Q
        S = ssm.H @ cov @ ssm.H.T + ssm.R
        gain = chol_solve(S, ssm.H @ cov).T
        mean = mean + gain @ (y - ssm.H @ mean - ssm.c)
        cov = (I - gain @ ssm.H) @ cov
        belief = GaussianBelief(mean, symmetrize(cov))
        out.append(belief)
    return out
