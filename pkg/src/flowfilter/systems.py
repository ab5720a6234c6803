"""Ground-truth simulators and observation operators for the three testbeds.

Every simulator returns a :class:`Dataset` whose metadata (system id,
parameters, seed) is enough to regenerate it bit for bit.  Trajectory ``i``
draws from its own stream spawned from the root seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded

SYSTEMS = ("sinusoidal", "lorenz96", "advdiff", "linear")


@dataclass
class Dataset:
    states: np.ndarray  # (N, K+1, m)
    measurements: np.ndarray  # (N, K, n)
    system: str = ""
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.states.ndim != 3 or self.measurements.ndim != 3:
            raise ValueError("states and measurements must be (N, T, dim) arrays")
        if self.states.shape[0] != self.measurements.shape[0]:
            raise ValueError("trajectory counts differ")
        if self.states.shape[1] != self.measurements.shape[1] + 1:
            raise ValueError("need K+1 states for K measurements")

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def K(self) -> int:
        return self.measurements.shape[1]

    @property
    def m(self) -> int:
        return self.states.shape[2]

    @property
    def n(self) -> int:
        return self.measurements.shape[2]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.states[idx], self.measurements[idx], self.system, dict(self.params), self.seed)


def _streams(seed: int, N: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(N)]


def _check_counts(N: int, K: int) -> None:
    if N < 1:
        raise ValueError("N must be >= 1")
    if K < 0:
        raise ValueError("K must be >= 0")


# --------------------------------------------------------------------------
# two-dimensional sinusoidal model


SINUSOIDAL_MEAN0 = np.array([1.0, 1.0])
SINUSOIDAL_VAR0 = 0.1


def sinusoidal_transition_mean(x: np.ndarray) -> np.ndarray:
    return 0.9 * np.sin(1.1 * x + 0.1 * np.pi) + 0.01


def sinusoidal_observation(x: np.ndarray) -> np.ndarray:
    """``arctan(x2 / x1)`` replicated into both measurement components.

    ``x1 == 0`` maps to ``+-pi/2`` by the sign of ``x2`` (0 when both vanish).
    """
    x = np.asarray(x, dtype=np.float64)
    x1, x2 = x[..., 0], x[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = x2 / x1
    angle = np.where(x1 == 0.0, np.sign(x2) * (np.pi / 2), np.arctan(ratio))
    return np.stack([angle, angle], axis=-1)


def simulate_sinusoidal(q2: float, r2: float, K: int, N: int, seed: int) -> Dataset:
    if q2 <= 0 or r2 <= 0:
        raise ValueError("q2 and r2 must be positive")
    _check_counts(N, K)
    states = np.empty((N, K + 1, 2))
    meas = np.empty((N, K, 2))
    q, r = math.sqrt(q2), math.sqrt(r2)
    for i, rng in enumerate(_streams(seed, N)):
        x = SINUSOIDAL_MEAN0 + math.sqrt(SINUSOIDAL_VAR0) * rng.standard_normal(2)
        states[i, 0] = x
        for k in range(K):
            x = sinusoidal_transition_mean(x) + q * rng.standard_normal(2)
            states[i, k + 1] = x
            meas[i, k] = sinusoidal_observation(x) + r * rng.standard_normal(2)
    return Dataset(states, meas, "sinusoidal", {"q2": q2, "r2": r2, "K": K, "N": N}, seed)


# --------------------------------------------------------------------------
# Lorenz-96


def lorenz96_drift(x: np.ndarray, forcing: float) -> np.ndarray:
    """Cyclic drift ``x[j-1] (x[j+1] - x[j-2]) - x[j] + F`` along the last axis."""
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + forcing


def rk4_step(x: np.ndarray, forcing: float, dt: float) -> np.ndarray:
    k1 = lorenz96_drift(x, forcing)
    k2 = lorenz96_drift(x + 0.5 * dt * k1, forcing)
    k3 = lorenz96_drift(x + 0.5 * dt * k2, forcing)
    k4 = lorenz96_drift(x + dt * k3, forcing)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def lorenz96_integrate(x0: np.ndarray, forcing: float, dt: float, n_steps: int) -> np.ndarray:
    """Noise-free RK4 integration; returns the final state."""
    x = np.array(x0, dtype=np.float64)
    for _ in range(n_steps):
        x = rk4_step(x, forcing, dt)
    return x


def lorenz96_initial(m: int) -> np.ndarray:
    j = np.arange(1, m + 1)
    return np.sin(2 * np.pi * j / m)


def lorenz96_observation(x: np.ndarray) -> np.ndarray:
    return np.asarray(x) ** 3


def simulate_lorenz96(
    m: int, F: float = 8.0, dt: float = 0.01, K: int = 500, N: int = 1, seed: int = 0, obs_var: float = 1.0
) -> Dataset:
    """RK4 on the drift, then additive ``sqrt(dt)`` Gaussian forcing, per step."""
    if m < 4:
        raise ValueError("Lorenz-96 needs m >= 4")
    _check_counts(N, K)
    states = np.empty((N, K + 1, m))
    meas = np.empty((N, K, m))
    sdt, sr = math.sqrt(dt), math.sqrt(obs_var)
    x0 = lorenz96_initial(m)
    for i, rng in enumerate(_streams(seed, N)):
        x = x0.copy()
        states[i, 0] = x
        for k in range(K):
            x = rk4_step(x, F, dt) + sdt * rng.standard_normal(m)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"Lorenz-96 blow-up at trajectory {i}, step {k + 1}")
            states[i, k + 1] = x
            meas[i, k] = lorenz96_observation(x) + sr * rng.standard_normal(m)
    params = {"m": m, "F": F, "dt": dt, "K": K, "N": N, "obs_var": obs_var}
    return Dataset(states, meas, "lorenz96", params, seed)


# --------------------------------------------------------------------------
# stochastic advection-diffusion


ADVDIFF_POINTS = 100
ADVDIFF_STEPS = 200


@dataclass(frozen=True)
class SensorLayout:
    indices: tuple[int, ...]
    grid_size: int = ADVDIFF_POINTS

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.size == 0 or np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= self.grid_size:
            raise ValueError("sensor indices must be strictly increasing and inside the grid")

    @classmethod
    def equally_spaced(cls, n: int, grid_size: int = ADVDIFF_POINTS) -> "SensorLayout":
        if not 1 <= n <= grid_size:
            raise ValueError("need 1 <= n <= grid size")
        idx = np.floor((np.arange(n) + 0.5) * grid_size / n).astype(int)
        return cls(tuple(int(i) for i in idx), grid_size)

    @property
    def n(self) -> int:
        return len(self.indices)


def advdiff_grid(points: int = ADVDIFF_POINTS) -> np.ndarray:
    """Interior nodes of [-1, 1]; the zero boundary nodes are excluded."""
    h = 2.0 / (points + 1)
    return -1.0 + h * np.arange(1, points + 1)


def advdiff_full_field(u: np.ndarray) -> np.ndarray:
    """Interior values padded with the zero Dirichlet boundary nodes."""
    u = np.asarray(u, dtype=np.float64)
    pad = [(0, 0)] * (u.ndim - 1) + [(1, 1)]
    return np.pad(u, pad)


def advdiff_banded_operator(dt: float, kappa: float, diff: float, points: int = ADVDIFF_POINTS) -> np.ndarray:
    """``I + dt*L`` in ``solve_banded`` (1, 1) layout.

    ``L u = kappa (u_i - u_{i-1})/h - diff (u_{i+1} - 2u_i + u_{i-1})/h^2``;
    upwinding assumes ``kappa >= 0``.
    """
    if kappa < 0:
        raise ValueError("upwind stencil assumes kappa >= 0")
    h = 2.0 / (points + 1)
    lower = -kappa / h - diff / h**2
    main = kappa / h + 2.0 * diff / h**2
    upper = -diff / h**2
    ab = np.zeros((3, points))
    ab[0, 1:] = dt * upper
    ab[1, :] = 1.0 + dt * main
    ab[2, :-1] = dt * lower
    return ab


def advdiff_source(s: np.ndarray) -> np.ndarray:
    return 5.0 * (s**2 - 1.0)


def advdiff_integrate(
    u0: np.ndarray,
    dt: float,
    n_steps: int,
    kappa: float = 0.5,
    diff: float = 0.01,
    source: bool = True,
) -> np.ndarray:
    """Deterministic backward-Euler integration; returns the final field."""
    u = np.array(u0, dtype=np.float64)
    ab = advdiff_banded_operator(dt, kappa, diff, u.shape[0])
    g = advdiff_source(advdiff_grid(u.shape[0])) if source else 0.0
    for _ in range(n_steps):
        u = solve_banded((1, 1), ab, u - dt * g)
    return u


def advdiff_observation(u: np.ndarray, sensors: SensorLayout) -> np.ndarray:
    return np.exp(-np.asarray(u)[..., list(sensors.indices)] - 1.0)


def simulate_advdiff(
    kappa: float = 0.5,
    diff: float = 0.01,
    sigma: float = 10.0,
    r2: float = 0.1,
    sensors: SensorLayout | None = None,
    N: int = 1,
    seed: int = 0,
    K: int = ADVDIFF_STEPS,
    dt: float = 0.005,
) -> Dataset:
    """Backward Euler in time with Euler-Maruyama forcing on the right-hand side."""
    sensors = sensors or SensorLayout.equally_spaced(10)
    if r2 <= 0:
        raise ValueError("r2 must be positive")
    _check_counts(N, K)
    s = advdiff_grid()
    ab = advdiff_banded_operator(dt, kappa, diff)
    g = advdiff_source(s)
    u0 = -np.sin(np.pi * s)
    states = np.empty((N, K + 1, ADVDIFF_POINTS))
    meas = np.empty((N, K, sensors.n))
    noise_scale = sigma * math.sqrt(dt)
    r = math.sqrt(r2)
    for i, rng in enumerate(_streams(seed, N)):
        u = u0.copy()
        states[i, 0] = u
        for k in range(K):
            rhs = u - dt * g + noise_scale * rng.standard_normal(ADVDIFF_POINTS)
            u = solve_banded((1, 1), ab, rhs)
            states[i, k + 1] = u
            meas[i, k] = advdiff_observation(u, sensors) + r * rng.standard_normal(sensors.n)
    params = {
        "kappa": kappa, "diff": diff, "sigma": sigma, "r2": r2,
        "sensors": list(sensors.indices), "N": N, "K": K, "dt": dt,
    }
    return Dataset(states, meas, "advdiff", params, seed)


# --------------------------------------------------------------------------
# scalar / small linear-Gaussian system for verification


@dataclass
class LinearGaussianSSM:
    """``x = F x' + b + w``, ``w ~ N(0, Q)``; ``y = H x + c + v``, ``v ~ N(0, R)``."""

    F: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    c: np.ndarray
    R: np.ndarray
    mu0: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        for name in ("F", "b", "Q", "H", "c", "R", "mu0", "Sigma0"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        for name in ("F", "Q", "H", "R", "Sigma0"):
            setattr(self, name, np.atleast_2d(getattr(self, name)))
        for name in ("Q", "R", "Sigma0"):
            if np.any(np.linalg.eigvalsh(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be positive definite")

    @property
    def m(self) -> int:
        return self.F.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[0]


def simulate_linear(ssm: LinearGaussianSSM, K: int, N: int, seed: int) -> Dataset:
    _check_counts(N, K)
    Lq, Lr, L0 = (np.linalg.cholesky(a) for a in (ssm.Q, ssm.R, ssm.Sigma0))
    states = np.empty((N, K + 1, ssm.m))
    meas = np.empty((N, K, ssm.n))
    for i, rng in enumerate(_streams(seed, N)):
        x = ssm.mu0 + L0 @ rng.standard_normal(ssm.m)
        states[i, 0] = x
        for k in range(K):
            x = ssm.F @ x + ssm.b + Lq @ rng.standard_normal(ssm.m)
            states[i, k + 1] = x
            meas[i, k] = ssm.H @ x + ssm.c + Lr @ rng.standard_normal(ssm.n)
    return Dataset(states, meas, "linear", {"K": K, "N": N}, seed)


# --------------------------------------------------------------------------
# particle-filter interface


@dataclass
class SSMInterface:
    """Single-step samplers and observation log-likelihood, vectorized over particles."""

    system: str
    state_dim: int
    obs_dim: int
    sample_initial: Callable[[int, np.random.Generator], np.ndarray]
    sample_transition: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    log_likelihood: Callable[[np.ndarray, np.ndarray], np.ndarray]


def _gauss_loglik_iso(resid: np.ndarray, var: float) -> np.ndarray:
    d = resid.shape[-1]
    return -0.5 * (np.sum(resid * resid, axis=-1) / var + d * math.log(2 * math.pi * var))


def make_ssm_interface(system: str, params: dict) -> SSMInterface:
    """Wrap a simulator's transition and Gaussian observation density."""
    if system == "sinusoidal":
        q, r2 = math.sqrt(params["q2"]), params["r2"]

        def init(N, rng):
            return SINUSOIDAL_MEAN0 + math.sqrt(SINUSOIDAL_VAR0) * rng.standard_normal((N, 2))

        def trans(x, rng):
            return sinusoidal_transition_mean(x) + q * rng.standard_normal(x.shape)

        def loglik(y, x):
            return _gauss_loglik_iso(y - sinusoidal_observation(x), r2)

        return SSMInterface(system, 2, 2, init, trans, loglik)

    if system == "lorenz96":
        m = int(params["m"])
        F, dt = params.get("F", 8.0), params.get("dt", 0.01)
        obs_var = params.get("obs_var", 1.0)
        x0 = lorenz96_initial(m)

        def init(N, rng):
            return np.tile(x0, (N, 1))

        def trans(x, rng):
            return rk4_step(x, F, dt) + math.sqrt(dt) * rng.standard_normal(x.shape)

        def loglik(y, x):
            return _gauss_loglik_iso(y - lorenz96_observation(x), obs_var)

        return SSMInterface(system, m, m, init, trans, loglik)

    if system == "advdiff":
        kappa, diff = params.get("kappa", 0.5), params.get("diff", 0.01)
        sigma, dt, r2 = params.get("sigma", 10.0), params.get("dt", 0.005), params["r2"]
        sensors = SensorLayout(tuple(params["sensors"]))
        ab = advdiff_banded_operator(dt, kappa, diff)
        g = advdiff_source(advdiff_grid())
        u0 = -np.sin(np.pi * advdiff_grid())
        scale = sigma * math.sqrt(dt)

        def init(N, rng):
            return np.tile(u0, (N, 1))

        def trans(x, rng):
            rhs = x - dt * g + scale * rng.standard_normal(x.shape)
            return solve_banded((1, 1), ab, rhs.T).T

        def loglik(y, x):
            return _gauss_loglik_iso(y - advdiff_observation(x, sensors), r2)

        return SSMInterface(system, ADVDIFF_POINTS, sensors.n, init, trans, loglik)

    if system == "linear":
        ssm: LinearGaussianSSM = params["ssm"]
        Lq, L0 = np.linalg.cholesky(ssm.Q), np.linalg.cholesky(ssm.Sigma0)
        R_inv = np.linalg.inv(ssm.R)
        _, logdet_R = np.linalg.slogdet(ssm.R)

        def init(N, rng):
            return ssm.mu0 + rng.standard_normal((N, ssm.m)) @ L0.T

        def trans(x, rng):
            return x @ ssm.F.T + ssm.b + rng.standard_normal(x.shape) @ Lq.T

        def loglik(y, x):
            resid = y - (x @ ssm.H.T + ssm.c)
            quad = np.einsum("...i,ij,...j->...", resid, R_inv, resid)
            return -0.5 * (quad + logdet_R + ssm.n * math.log(2 * math.pi))

        return SSMInterface(system, ssm.m, ssm.n, init, trans, loglik)

    raise ValueError(f"unknown system id {system!r}")


def simulate(system: str, params: dict, N: int, seed: int) -> Dataset:
    """Dispatch by system id with keyword parameters."""
    p = dict(params)
    if system == "sinusoidal":
        return simulate_sinusoidal(p["q2"], p["r2"], int(p["K"]), N, seed)
    if system == "lorenz96":
        return simulate_lorenz96(
            int(p["m"]), p.get("F", 8.0), p.get("dt", 0.01), int(p["K"]), N, seed, p.get("obs_var", 1.0)
        )
    if system == "advdiff":
        sensors = SensorLayout(tuple(p["sensors"])) if "sensors" in p else SensorLayout.equally_spaced(int(p.get("n", 10)))
        return simulate_advdiff(
            p.get("kappa", 0.5), p.get("diff", 0.01), p.get("sigma", 10.0), p["r2"], sensors, N, seed,
            int(p.get("K", ADVDIFF_STEPS)), p.get("dt", 0.005),
        )
    raise ValueError(f"unknown system id {system!r}")
