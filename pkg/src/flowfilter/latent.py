"""Latent linear-Gaussian state-space models and their training densities.

Two parameterizations are provided:

* :class:`FbfLatentModel` -- transition coefficients ``A(g), B(g), Qx(g)``
  produced by networks of the transformed measurement ``g = V(y)``, and a
  constant one-step measurement predictor ``g = C + D chi_prev + noise``.
* :class:`FbfPrimeLatentModel` -- a classical linear SSM
  ``chi = E + F chi_prev + noise``, ``g = G + H chi + noise``.

Covariances are diagonal with softplus-transformed entries.  All log-density
functions take batches (rows) and return a :class:`~flowfilter.autodiff.Tensor`
of shape ``(batch,)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .flows import LOG_2PI, FlowTransform
from .nn import MLP


def _softplus(v):
    return np.logaddexp(0.0, v)


def _rows(x) -> Tensor:
    x = ad.as_tensor(x)
    if x.data.ndim == 1:
        return ad.Tensor(x.data[None, :])
    return x


def gaussian_logpdf_diag(resid: Tensor, var: Tensor) -> Tensor:
    """Row-wise ``log N(resid | 0, diag(var))``; ``var`` is a row or a batch."""
    log_var = ad.log(var)
    quad = ad.mul(ad.mul(resid, resid), ad.exp(-log_var))
    dim = resid.shape[-1]
    total = ad.sum(quad, axis=-1)
    if log_var.data.ndim == 1:
        total = total + ad.sum(log_var)
    else:
        total = total + ad.sum(log_var, axis=-1)
    return ad.mul(-0.5, total + dim * LOG_2PI)


def batched_matvec(mat_flat: Tensor, v: Tensor, m: int) -> Tensor:
    """``out[b] = M[b] @ v[b]`` with ``M`` stored row-major as ``(batch, m*m)``."""
    tiled = ad.concat([v] * m, axis=-1)
    prod = ad.reshape(ad.mul(mat_flat, tiled), (v.shape[0], m, m))
    return ad.sum(prod, axis=-1)


@dataclass
class StepCoefficients:
    """Per-step coefficients consumed by the two-step latent recursion."""

    A: np.ndarray  # (K, m)
    B: np.ndarray  # (K, m, m)
    Q_chi: np.ndarray  # (K, m, m)
    C: np.ndarray  # (n,)
    D: np.ndarray  # (n, m)
    Q_gamma: np.ndarray  # (n, n)


class FbfLatentModel:
    variant = "fbf"

    def __init__(
        self,
        store: ParameterStore,
        m: int,
        n: int,
        hidden: list[int],
        rng: np.random.Generator,
        prefix: str = "latent",
    ):
        self.m, self.n = m, n
        self.net_A = MLP(store, f"{prefix}.A", n, hidden, m, rng)
        self.net_B = MLP(store, f"{prefix}.B", n, hidden, m * m, rng, output_bias=np.eye(m).ravel())
        self.net_Q = MLP(store, f"{prefix}.Qchi", n, hidden, m, rng)
        self.C = store.add(f"{prefix}.C", np.zeros(n))
        self.D = store.add(f"{prefix}.D", np.zeros((n, m)))
        self.q_gamma = store.add(f"{prefix}.Qgamma", np.zeros(n))

    def conditioners(self, gamma) -> tuple[Tensor, Tensor, Tensor]:
        """Differentiable ``(A, vec(B), diag(Qx))`` rows for a batch of ``gamma``."""
        gamma = _rows(gamma)
        return self.net_A(gamma), self.net_B(gamma), ad.softplus(self.net_Q(gamma))

    def q_gamma_diag(self) -> np.ndarray:
        return _softplus(self.q_gamma.data)

    def step_coefficients(self, gammas: np.ndarray) -> StepCoefficients:
        A, Bf, Q = self.conditioners(gammas)
        K, m = A.shape
        Q_chi = np.zeros((K, m, m))
        Q_chi[:, np.arange(m), np.arange(m)] = Q.data
        return StepCoefficients(
            A=A.data,
            B=Bf.data.reshape(K, m, m),
            Q_chi=Q_chi,
            C=self.C.data.copy(),
            D=self.D.data.copy(),
            Q_gamma=np.diag(self.q_gamma_diag()),
        )


def eval_conditioners(model: FbfLatentModel, gamma) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``A`` (m,), ``B`` (m, m) and the diagonal of ``Qx`` for one ``gamma``."""
    A, Bf, Q = model.conditioners(np.asarray(gamma, dtype=np.float64))
    m = model.m
    return A.data[0], Bf.data[0].reshape(m, m), Q.data[0]


class FbfPrimeLatentModel:
    variant = "fbf_prime"

    def __init__(self, store: ParameterStore, m: int, n: int, prefix: str = "latent"):
        self.m, self.n = m, n
        self.E = store.add(f"{prefix}.E", np.zeros(m))
        self.F = store.add(f"{prefix}.F", np.eye(m))
        self.G = store.add(f"{prefix}.G", np.zeros(n))
        self.H = store.add(f"{prefix}.H", np.zeros((n, m)))
        self.p_chi = store.add(f"{prefix}.Pchi", np.zeros(m))
        self.p_gamma = store.add(f"{prefix}.Pgamma", np.zeros(n))

    def p_chi_diag(self) -> np.ndarray:
        return _softplus(self.p_chi.data)

    def p_gamma_diag(self) -> np.ndarray:
        return _softplus(self.p_gamma.data)


def _flow_rows(flow: FlowTransform, x) -> tuple[Tensor, Tensor]:
    return flow.forward(_rows(x))


def f_s(model: FbfLatentModel, T: FlowTransform, V: FlowTransform, x_prev, x, y) -> Tensor:
    """``log p(x_k | x_{k-1}, y_k)`` under the latent transition."""
    chi, logdet = _flow_rows(T, x)
    chi_prev, _ = _flow_rows(T, x_prev)
    gamma, _ = _flow_rows(V, y)
    A, Bf, Q = model.conditioners(gamma)
    resid = chi - A - batched_matvec(Bf, chi_prev, model.m)
    return gaussian_logpdf_diag(resid, Q) + logdet


def f_o(model: FbfLatentModel, T: FlowTransform, V: FlowTransform, x_prev, y) -> Tensor:
    """``log p(y_k | x_{k-1})`` under the one-step measurement predictor."""
    chi_prev, _ = _flow_rows(T, x_prev)
    gamma, logdet = _flow_rows(V, y)
    resid = gamma - model.C - ad.matmul(chi_prev, ad.transpose(model.D))
    return gaussian_logpdf_diag(resid, ad.softplus(model.q_gamma)) + logdet


def f_s_prime(model: FbfPrimeLatentModel, T: FlowTransform, x_prev, x) -> Tensor:
    """``log p(x_k | x_{k-1})`` for the classical linear latent SSM."""
    chi, logdet = _flow_rows(T, x)
    chi_prev, _ = _flow_rows(T, x_prev)
    resid = chi - model.E - ad.matmul(chi_prev, ad.transpose(model.F))
    return gaussian_logpdf_diag(resid, ad.softplus(model.p_chi)) + logdet


def f_o_prime(model: FbfPrimeLatentModel, T: FlowTransform, V: FlowTransform, x, y) -> Tensor:
    """``log p(y_k | x_k)``; note the conditioning is on the current state."""
    chi, _ = _flow_rows(T, x)
    gamma, logdet = _flow_rows(V, y)
    resid = gamma - model.G - ad.matmul(chi, ad.transpose(model.H))
    return gaussian_logpdf_diag(resid, ad.softplus(model.p_gamma)) + logdet


@dataclass
class ConvertedLatentModel:
    """A classical linear SSM rewritten in the observation-conditioned form.

    ``A(g) = a0 + gain @ g`` is affine in ``g``; the other coefficients are
    constant.  Covariances are full matrices.
    """

    a0: np.ndarray
    gain: np.ndarray
    B: np.ndarray
    Q_chi: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q_gamma: np.ndarray
    variant: str = "converted"

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[0]

    def step_coefficients(self, gammas: np.ndarray) -> StepCoefficients:
        gammas = np.atleast_2d(gammas)
        K = gammas.shape[0]
        return StepCoefficients(
            A=self.a0[None, :] + gammas @ self.gain.T,
            B=np.broadcast_to(self.B, (K, self.m, self.m)).copy(),
            Q_chi=np.broadcast_to(self.Q_chi, (K, self.m, self.m)).copy(),
            C=self.C,
            D=self.D,
            Q_gamma=self.Q_gamma,
        )


def fbfprime_to_fbf(
    E, F, G, H, P_chi, P_gamma
) -> ConvertedLatentModel:
    """Rewrite ``chi = E + F chi' + w, g = G + H chi + v`` as an
    observation-conditioned transition plus a one-step measurement predictor.

    ``P_chi``/``P_gamma`` may be diagonals (vectors) or full matrices.
    Accepts a :class:`FbfPrimeLatentModel` through :func:`convert_model`.
    """
    E, F, G, H = (np.asarray(a, dtype=np.float64) for a in (E, F, G, H))
    P_chi = np.asarray(P_chi, dtype=np.float64)
    P_gamma = np.asarray(P_gamma, dtype=np.float64)
    if P_chi.ndim == 1:
        P_chi = np.diag(P_chi)
    if P_gamma.ndim == 1:
        P_gamma = np.diag(P_gamma)
    m = F.shape[0]
    S = H @ P_chi @ H.T + P_gamma
    # K' = P_chi H^T S^{-1}, computed through a symmetric solve
    gain = np.linalg.solve(S, H @ P_chi).T
    I = np.eye(m)
    C = G + H @ E
    Q_chi = (I - gain @ H) @ P_chi
    return ConvertedLatentModel(
        a0=E - gain @ C,
        gain=gain,
        B=F - gain @ H @ F,
        Q_chi=0.5 * (Q_chi + Q_chi.T),
        C=C,
        D=H @ F,
        Q_gamma=S,
    )


def convert_model(model: FbfPrimeLatentModel) -> ConvertedLatentModel:
    return fbfprime_to_fbf(
        model.E.data, model.F.data, model.G.data, model.H.data,
        model.p_chi_diag(), model.p_gamma_diag(),
    )
