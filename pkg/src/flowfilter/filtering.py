"""Closed-form latent filtering and mapping back to the original space.

The latent belief ``N(mu, Sigma)`` over ``chi = T(x)`` is advanced per
measurement in two steps: condition the previous-state belief on
``gamma_k = V(y_k)`` through the one-step measurement predictor, then push it
through the observation-conditioned linear transition.  Samples in the
original space are ``T^{-1}`` of latent draws.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .flows import LOG_2PI, flow_forward, flow_inverse


class CholeskyError(np.linalg.LinAlgError):
    pass


JITTERS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)


def jittered_cholesky(S: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, adding escalating diagonal jitter on failure."""
    S = 0.5 * (S + S.T)
    eye = np.eye(S.shape[0])
    for jitter in JITTERS:
        try:
            return np.linalg.cholesky(S + jitter * eye)
        except np.linalg.LinAlgError:
            continue
    raise CholeskyError("matrix is not positive definite even with jitter 1e-8")


def chol_solve(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``S X = rhs`` for symmetric positive definite ``S``."""
    L = jittered_cholesky(S)
    tmp = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, tmp)


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _as_cov(Q) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    return np.diag(Q) if Q.ndim == 1 else Q


def measurement_update(
    belief: GaussianBelief, gamma, C, D, Q_gamma, exact: bool = True
) -> GaussianBelief:
    """Condition the previous latent state on ``gamma = C + D chi + v``.

    ``exact=False`` reproduces the simplified gain ``Sigma D^T Q^{-1}`` that
    omits the prior term from the innovation covariance; it coincides with
    the exact update only when ``D Sigma D^T`` is negligible next to ``Q``.
    """
    mu, Sigma = belief.mean, belief.cov
    gamma = np.asarray(gamma, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    Q = _as_cov(Q_gamma)
    innovation = gamma - C - D @ mu
    SDt = Sigma @ D.T
    S = D @ SDt + Q if exact else Q
    # gain^T = S^{-1} D Sigma
    gain_t = chol_solve(S, SDt.T)
    mean = mu + gain_t.T @ innovation
    cov = Sigma - SDt @ gain_t
    return GaussianBelief(mean, symmetrize(cov))


def information_form_update(belief: GaussianBelief, gamma, C, D, Q_gamma) -> GaussianBelief:
    """Same posterior as :func:`measurement_update`, via precision matrices."""
    mu, Sigma = belief.mean, belief.cov
    D = np.asarray(D, dtype=np.float64)
    Q = _as_cov(Q_gamma)
    Q_inv = np.linalg.inv(Q)
    precision = np.linalg.inv(Sigma) + D.T @ Q_inv @ D
    cov = np.linalg.inv(precision)
    rhs = np.linalg.solve(Sigma, mu) + D.T @ Q_inv @ (np.asarray(gamma) - np.asarray(C))
    return GaussianBelief(cov @ rhs, symmetrize(cov))


def state_propagate(belief: GaussianBelief, A, B, Q_chi) -> GaussianBelief:
    """Push the conditioned belief through ``chi = A + B chi' + w``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    mean = A + B @ belief.mean
    cov = B @ belief.cov @ B.T + _as_cov(Q_chi)
    return GaussianBelief(mean, symmetrize(cov))


def kalman_step(belief: GaussianBelief, gamma, model) -> GaussianBelief:
    """Predict/update for ``chi = E + F chi' + w, gamma = G + H chi + v``.

    ``model`` needs ``E, F, G, H`` arrays (or tensors) and ``P_chi``,
    ``P_gamma`` covariances; :func:`linear_params` adapts latent models.
    """
    E, F, G, H, P_chi, P_gamma = linear_params(model)
    mu, Sigma = belief.mean, belief.cov
    pred_cov = F @ Sigma @ F.T + P_chi
    S = H @ pred_cov @ H.T + P_gamma
    gain = chol_solve(S, H @ pred_cov).T
    pred_mean = E + F @ mu
    mean = pred_mean + gain @ (np.asarray(gamma) - H @ pred_mean - G)
    cov = (np.eye(mu.shape[0]) - gain @ H) @ pred_cov
    return GaussianBelief(mean, symmetrize(cov))


def linear_params(model):
    """``(E, F, G, H, P_chi, P_gamma)`` as plain arrays with full covariances."""
    if hasattr(model, "p_chi_diag"):
        return (
            model.E.data, model.F.data, model.G.data, model.H.data,
            np.diag(model.p_chi_diag()), np.diag(model.p_gamma_diag()),
        )
    vals = [np.asarray(getattr(model, k), dtype=np.float64) for k in ("E", "F", "G", "H")]
    return (*vals, _as_cov(model.P_chi), _as_cov(model.P_gamma))


@dataclass
class LinearSSMParams:
    """Plain-array container accepted by :func:`kalman_step`."""

    E: np.ndarray
    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    P_chi: np.ndarray
    P_gamma: np.ndarray


@dataclass
class FilterRun:
    """Latent beliefs for ``k = 0..K``; index 0 is the initial belief."""

    means: np.ndarray  # (K+1, m)
    covs: np.ndarray  # (K+1, m, m)
    step_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def n_steps(self) -> int:
        return self.means.shape[0] - 1

    def belief(self, k: int) -> GaussianBelief:
        return GaussianBelief(self.means[k], self.covs[k])


class FilterAborted(FloatingPointError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


def _transform_measurements(V, ys: np.ndarray) -> np.ndarray:
    gammas, _ = flow_forward(V, ys)
    bad = ~np.all(np.isfinite(gammas), axis=-1)
    if np.any(bad):
        raise FilterAborted(int(np.argmax(bad)) + 1, "non-finite transformed measurement")
    return gammas


def fbf_filter(model, ys, exact: bool = True) -> FilterRun:
    """Run the latent recursion over ``ys`` (K, n).

    ``model`` is any object with ``T``, ``V``, ``latent``, ``mu0``, ``Sigma0``
    (normally a :class:`~flowfilter.training.TrainedFilter`).  A classical
    linear latent model is filtered with :func:`kalman_step` instead.
    """
    ys = np.asarray(ys, dtype=np.float64).reshape(-1, model.latent.n)
    K = ys.shape[0]
    m = model.latent.m
    means = np.empty((K + 1, m))
    covs = np.empty((K + 1, m, m))
    belief = GaussianBelief(model.mu0, model.Sigma0)
    means[0], covs[0] = belief.mean, belief.cov
    seconds = np.zeros(K)
    if K == 0:
        return FilterRun(means, covs, seconds)

    try:
        gammas = _transform_measurements(model.V, ys)
    except FloatingPointError as err:
        if isinstance(err, FilterAborted):
            raise
        raise FilterAborted(1, str(err)) from None

    if getattr(model.latent, "variant", None) == "fbf_prime":
        for k in range(K):
            t0 = time.perf_counter()
            belief = kalman_step(belief, gammas[k], model.latent)
            seconds[k] = time.perf_counter() - t0
            means[k + 1], covs[k + 1] = belief.mean, belief.cov
        return FilterRun(means, covs, seconds)

    coef = model.latent.step_coefficients(gammas)
    for k in range(K):
        t0 = time.perf_counter()
        post = measurement_update(belief, gammas[k], coef.C, coef.D, coef.Q_gamma, exact=exact)
        belief = state_propagate(post, coef.A[k], coef.B[k], coef.Q_chi[k])
        if not (np.all(np.isfinite(belief.mean)) and np.all(np.isfinite(belief.cov))):
            raise FilterAborted(k + 1, "non-finite belief")
        seconds[k] = time.perf_counter() - t0
        means[k + 1], covs[k + 1] = belief.mean, belief.cov
    return FilterRun(means, covs, seconds)


def latent_samples(belief: GaussianBelief, n: int, rng: np.random.Generator) -> np.ndarray:
    L = jittered_cholesky(belief.cov) if np.any(belief.cov) else np.zeros_like(belief.cov)
    eps = rng.standard_normal((n, belief.dim))
    return belief.mean[None, :] + eps @ L.T


def sample_posterior(model, belief: GaussianBelief, n: int, seed) -> np.ndarray:
    """``n`` original-space draws ``T^{-1}(chi)``, ``chi ~ N(mu, Sigma)``."""
    rng = np.random.default_rng(seed)
    return flow_inverse(model.T, latent_samples(belief, n, rng))


def sample_run(model, run: FilterRun, n: int, seed) -> np.ndarray:
    """Draws for steps ``1..K`` of ``run``; shape (K, n, m).

    Each step uses its own stream spawned from ``seed``; all draws are pushed
    through ``T^{-1}`` in one batch.
    """
    K, m = run.n_steps, run.means.shape[1]
    if K == 0:
        return np.zeros((0, n, m))
    streams = np.random.SeedSequence(seed).spawn(K)
    chi = np.stack(
        [latent_samples(run.belief(k + 1), n, np.random.default_rng(s)) for k, s in enumerate(streams)]
    )
    x = flow_inverse(model.T, chi.reshape(K * n, m))
    return x.reshape(K, n, m)


def gaussian_logpdf(z: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    L = jittered_cholesky(cov)
    diff = np.atleast_2d(z) - mean
    sol = np.linalg.solve(L, diff.T)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (np.sum(sol * sol, axis=0) + logdet + mean.shape[0] * LOG_2PI)


def posterior_logdensity(model, belief: GaussianBelief, x) -> np.ndarray:
    """Original-space filtering log-density ``log N(T(x)|mu,Sigma) + log|det dT/dx|``."""
    x = np.asarray(x, dtype=np.float64)
    z, ld = flow_forward(model.T, np.atleast_2d(x))
    out = gaussian_logpdf(z, belief.mean, belief.cov) + ld
    return out[0] if x.ndim == 1 else out
