"""Maximum-likelihood training of the flows and the latent model."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tape, Tensor
from .flows import FlowTransform, flow_forward
from .latent import (
    FbfLatentModel,
    FbfPrimeLatentModel,
    f_o,
    f_o_prime,
    f_s,
    f_s_prime,
    gaussian_logpdf_diag,
)

log = logging.getLogger(__name__)

VARIANTS = ("fbf", "fbf_prime")
SIGMA0_RIDGE = 1e-4


@dataclass
class ModelConfig:
    variant: str = "fbf"
    state_dim: int = 2
    obs_dim: int = 2
    flow_blocks: int = 6
    flow_layers: int = 3
    flow_units: int = 64
    cond_layers: int = 6
    cond_units: int = 64
    clamp: float = 2.0
    standardize: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.state_dim < 2 or self.obs_dim < 2:
            raise ValueError("state and measurement dims must be >= 2")
        if self.flow_blocks < 0 or self.clamp <= 0:
            raise ValueError("invalid flow settings")


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    lr: float = 5e-4
    decay: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 0
    clip_norm: float = 10.0
    init_loss: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("weighting factors must be positive")
        if self.lr <= 0 or not (0 < self.decay <= 1):
            raise ValueError("need lr > 0 and decay in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs >= 0 and batch_size >= 1 required")


@dataclass
class TrainedFilter:
    store: ParameterStore
    T: FlowTransform
    V: FlowTransform
    latent: FbfLatentModel | FbfPrimeLatentModel
    mu0: np.ndarray
    Sigma0: np.ndarray
    model_config: ModelConfig
    train_config: TrainConfig = field(default_factory=TrainConfig)
    history: list[tuple[int, float, float]] = field(default_factory=list)
    # set when loaded from disk, where only the number of iterations is kept
    saved_history_length: int | None = None

    @property
    def variant(self) -> str:
        return self.model_config.variant

    def metadata(self) -> dict:
        return {"model": asdict(self.model_config), "train": asdict(self.train_config)}


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, history):
        super().__init__(
            f"non-finite objective at iteration {iteration}; "
            "typical cause is an exploding coupling scale, try a lower learning rate"
        )
        self.iteration = iteration
        self.history = history


def build_model(cfg: ModelConfig, rng: np.random.Generator) -> TrainedFilter:
    """Fresh flows and latent model; the flows start as the identity map."""
    store = ParameterStore()
    flow_hidden = [cfg.flow_units] * cfg.flow_layers
    T = FlowTransform.build(store, "T", cfg.state_dim, cfg.flow_blocks, flow_hidden, rng, cfg.clamp, cfg.standardize)
    V = FlowTransform.build(store, "V", cfg.obs_dim, cfg.flow_blocks, flow_hidden, rng, cfg.clamp, cfg.standardize)
    if cfg.variant == "fbf":
        latent = FbfLatentModel(store, cfg.state_dim, cfg.obs_dim, [cfg.cond_units] * cfg.cond_layers, rng)
    else:
        latent = FbfPrimeLatentModel(store, cfg.state_dim, cfg.obs_dim)
    m = cfg.state_dim
    return TrainedFilter(store, T, V, latent, np.zeros(m), np.eye(m), cfg)


def lr_schedule(tau: int, lr0: float, decay: float, epochs: int) -> float:
    """``lr0 * decay ** (tau / epochs)``."""
    if epochs <= 0:
        return lr0
    return lr0 * decay ** (tau / epochs)


def objective_tensor(model: TrainedFilter, x_prev, x, y, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    """Differentiable minibatch objective (to be maximized)."""
    latent = model.latent
    if latent.variant == "fbf":
        ls = f_s(latent, model.T, model.V, x_prev, x, y)
        lo = f_o(latent, model.T, model.V, x_prev, y)
    else:
        ls = f_s_prime(latent, model.T, x_prev, x)
        lo = f_o_prime(latent, model.T, model.V, x, y)
    return ad.mul(alpha, ad.mean(ls)) + ad.mul(beta, ad.mean(lo))


def minibatch_objective(
    model: TrainedFilter, x_prev, x, y, alpha: float = 1.0, beta: float = 1.0
) -> tuple[float, dict[str, np.ndarray]]:
    """Objective value and the gradients of its negation (for descent)."""
    with Tape() as tape:
        obj = objective_tensor(model, x_prev, x, y, alpha, beta)
        loss = ad.mul(-1.0, obj)
    return float(obj.data), tape.backward(output=loss)


def sample_triples(states: np.ndarray, meas: np.ndarray, size: int, rng: np.random.Generator):
    """Uniform draw of (trajectory, time) pairs -> (x_{k-1}, x_k, y_k) batches."""
    N, K = meas.shape[0], meas.shape[1]
    idx = rng.integers(0, N * K, size=size)
    traj, t = idx // K, idx % K + 1
    return states[traj, t - 1], states[traj, t], meas[traj, t - 1]


class Adam:
    def __init__(self, params: list[Tensor], b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    with np.errstate(over="ignore", invalid="ignore"):
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if not math.isfinite(total):
        return grads, total
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads, total


def estimate_initial_belief(T: FlowTransform, x0, ridge: float = SIGMA0_RIDGE) -> tuple[np.ndarray, np.ndarray]:
    """Mean and unbiased covariance of ``T(x0)`` samples, plus a ridge."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] < 1:
        raise ValueError("need at least one initial sample")
    z, _ = flow_forward(T, x0)
    mu = z.mean(axis=0)
    m = z.shape[1]
    if z.shape[0] == 1:
        return mu, ridge * np.eye(m)
    diff = z - mu
    cov = diff.T @ diff / (z.shape[0] - 1)
    return mu, 0.5 * (cov + cov.T) + ridge * np.eye(m)


class InitialBeliefParams:
    """Trainable ``mu0`` and diagonal ``Sigma0`` (softplus) for the optional term."""

    def __init__(self, store: ParameterStore, m: int, prefix: str = "init"):
        self.mu0 = store.add(f"{prefix}.mu0", np.zeros(m))
        self.s0 = store.add(f"{prefix}.Sigma0", np.full(m, math.log(math.e - 1.0)))

    def cov(self) -> np.ndarray:
        return np.diag(np.logaddexp(0.0, self.s0.data))


def initial_distribution_loss(T: FlowTransform, x0, mu0: Tensor, s0: Tensor) -> Tensor:
    """Sample mean of ``log N(T(x0) | mu0, diag(softplus(s0))) + log|det dT/dx0|``."""
    z, logdet = T.forward(np.atleast_2d(x0))
    return ad.mean(gaussian_logpdf_diag(z - mu0, ad.softplus(s0)) + logdet)


def train(states, meas, model_cfg: ModelConfig, cfg: TrainConfig, model: TrainedFilter | None = None) -> TrainedFilter:
    """Fit flows and latent model by minibatch gradient ascent.

    ``states`` is (N, K+1, m) and ``meas`` (N, K, n); single trajectories may
    drop the leading axis.  ``epochs`` counts minibatch updates.  Passing a
    pre-built ``model`` lets callers freeze slots before training.
    """
    states = np.asarray(states, dtype=np.float64)
    meas = np.asarray(meas, dtype=np.float64)
    if states.ndim == 2:
        states, meas = states[None], meas[None]
    if states.shape[0] == 0 or meas.shape[1] == 0:
        raise ValueError("empty dataset")
    if states.shape[1] != meas.shape[1] + 1:
        raise ValueError("states must have one more time level than measurements")

    init_seq, batch_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    if model is None:
        model = build_model(model_cfg, np.random.default_rng(init_seq))
    model.train_config = cfg
    x0 = states[:, 0]
    for flow, data in ((model.T, states), (model.V, meas)):
        if flow.norm is not None:
            flow.norm.fit(data)

    init_params = None
    if cfg.init_loss:
        init_params = InitialBeliefParams(model.store, model_cfg.state_dim)
        mu, _ = estimate_initial_belief(model.T, x0)
        init_params.mu0.data[...] = mu

    params = model.store.trainable()
    names = [p.name for p in params]
    opt = Adam(params)
    rng = np.random.default_rng(batch_seq)
    history: list[tuple[int, float, float]] = []
    for tau in range(cfg.epochs):
        lr = lr_schedule(tau, cfg.lr, cfg.decay, cfg.epochs)
        xp, x, y = sample_triples(states, meas, cfg.batch_size, rng)
        try:
            with Tape() as tape:
                obj = objective_tensor(model, xp, x, y, cfg.alpha, cfg.beta)
                if init_params is not None:
                    obj = obj + initial_distribution_loss(model.T, x0, init_params.mu0, init_params.s0)
                loss = ad.mul(-1.0, obj)
            grads = tape.backward(output=loss)
        except FloatingPointError:
            model.history = history
            raise TrainingDiverged(tau, history) from None
        glist = [grads.get(n, np.zeros(p.shape)) for n, p in zip(names, params)]
        glist, norm = clip_by_global_norm(glist, cfg.clip_norm)
        if not math.isfinite(norm):
            model.history = history
            raise TrainingDiverged(tau, history)
        value = float(obj.data)
        history.append((tau, value, lr))
        opt.step(glist, lr)
        if tau % 100 == 0:
            log.debug("iter %d objective %.4f lr %.2e", tau, value, lr)

    model.history = history
    if init_params is not None:
        model.mu0, model.Sigma0 = init_params.mu0.data.copy(), init_params.cov()
    else:
        model.mu0, model.Sigma0 = estimate_initial_belief(model.T, x0)
    return model
