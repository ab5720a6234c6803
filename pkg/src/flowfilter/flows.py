"""RealNVP-style affine coupling flows with exact log-determinants.

Inputs are batches of shape ``(batch, D)``.  Each coupling block keeps the
passive coordinates (``mask == 1``) fixed and applies

    z_active = x_active * exp(s~(x_passive)) + t(x_passive),
    s~ = c * tanh(s / c),

so the log-det-Jacobian is the sum of ``s~`` over active coordinates.

A flow may start with a frozen per-coordinate standardization
``(x - loc) * exp(-log_scale)``.  It is fitted once from data so that badly
scaled inputs (cubed Lorenz-96 measurements reach 1e3) land in the range the
clamped couplings can handle; its log-det is the constant ``-sum(log_scale)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .nn import MLP

LOG_2PI = math.log(2.0 * math.pi)


def alternating_mask(dim: int, block_index: int) -> np.ndarray:
    """Binary passive-coordinate mask; parity alternates from block to block."""
    if dim < 2:
        raise ValueError("coupling needs dim >= 2")
    idx = np.arange(dim)
    return (idx % 2 == block_index % 2).astype(np.float64)


@dataclass
class CouplingBlock:
    mask: np.ndarray
    scale_net: MLP
    shift_net: MLP
    clamp: float = 2.0

    @property
    def dim(self) -> int:
        return self.mask.shape[0]

    def _scale_shift(self, passive: Tensor) -> tuple[Tensor, Tensor]:
        active = 1.0 - self.mask
        s = self.scale_net(passive)
        s = ad.mul(self.clamp, ad.tanh(ad.mul(1.0 / self.clamp, s)))
        return ad.mul(s, active), ad.mul(self.shift_net(passive), active)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        x = ad.as_tensor(x)
        passive = ad.mul(x, self.mask)
        s, t = self._scale_shift(passive)
        z = passive + ad.mul(ad.mul(x, ad.exp(s)) + t, 1.0 - self.mask)
        return z, ad.sum(s, axis=-1)

    def inverse(self, z) -> Tensor:
        z = ad.as_tensor(z)
        passive = ad.mul(z, self.mask)
        s, t = self._scale_shift(passive)
        return passive + ad.mul(ad.mul(z - t, ad.exp(-s)), 1.0 - self.mask)


def coupling_forward(block: CouplingBlock, x) -> tuple[Tensor, Tensor]:
    return block.forward(x)


def coupling_inverse(block: CouplingBlock, z) -> Tensor:
    return block.inverse(z)


@dataclass
class Standardizer:
    loc: Tensor
    log_scale: Tensor

    def fit(self, data: np.ndarray, floor: float = 1e-6) -> None:
        """Set location and scale from the column moments of ``data``."""
        flat = np.asarray(data, dtype=np.float64).reshape(-1, self.loc.shape[0])
        self.loc.data[...] = flat.mean(axis=0)
        self.log_scale.data[...] = np.log(np.maximum(flat.std(axis=0), floor))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        z = ad.mul(x - self.loc, ad.exp(ad.mul(-1.0, self.log_scale)))
        ld = np.full(x.shape[:-1], -float(np.sum(self.log_scale.data)))
        return z, ad.Tensor(ld)

    def inverse(self, z: Tensor) -> Tensor:
        return ad.mul(z, ad.exp(self.log_scale)) + self.loc


@dataclass
class FlowTransform:
    dim: int
    blocks: list[CouplingBlock] = field(default_factory=list)
    norm: Standardizer | None = None

    @classmethod
    def build(
        cls,
        store: ParameterStore,
        prefix: str,
        dim: int,
        n_blocks: int,
        hidden: list[int],
        rng: np.random.Generator,
        clamp: float = 2.0,
        standardize: bool = False,
    ) -> "FlowTransform":
        if dim < 2:
            raise ValueError("flows need dim >= 2")
        norm = None
        if standardize:
            # frozen slots: stored with the checkpoint, never touched by the optimizer
            norm = Standardizer(
                store.add(f"{prefix}.norm.loc", np.zeros(dim), trainable=False),
                store.add(f"{prefix}.norm.log_scale", np.zeros(dim), trainable=False),
            )
        blocks = []
        for k in range(n_blocks):
            s = MLP(store, f"{prefix}.{k}.s", dim, hidden, dim, rng)
            t = MLP(store, f"{prefix}.{k}.t", dim, hidden, dim, rng)
            blocks.append(CouplingBlock(alternating_mask(dim, k), s, t, clamp))
        return cls(dim, blocks, norm)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        z = ad.as_tensor(x)
        if z.shape[-1] != self.dim:
            raise ad.ShapeError(f"flow expects last dim {self.dim}, got {z.shape}")
        total = None
        if self.norm is not None:
            z, total = self.norm.forward(z)
        for block in self.blocks:
            z, ld = block.forward(z)
            total = ld if total is None else total + ld
        if total is None:
            total = ad.Tensor(np.zeros(z.shape[:-1]))
        return z, total

    def inverse(self, z) -> Tensor:
        x = ad.as_tensor(z)
        for block in reversed(self.blocks):
            x = block.inverse(x)
        if self.norm is not None:
            x = self.norm.inverse(x)
        return x

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        return self.forward(x)


def flow_forward(flow: FlowTransform, x) -> tuple[np.ndarray, np.ndarray]:
    """Numpy convenience wrapper: accepts a vector or a batch."""
    arr = np.asarray(x, dtype=np.float64)
    z, ld = flow.forward(np.atleast_2d(arr))
    if arr.ndim == 1:
        return z.data[0], ld.data[0]
    return z.data, ld.data


def flow_inverse(flow: FlowTransform, z) -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    x = flow.inverse(np.atleast_2d(arr)).data
    return x[0] if arr.ndim == 1 else x


def standard_normal_logpdf(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    return -0.5 * (np.sum(z * z, axis=-1) + z.shape[-1] * LOG_2PI)


def log_density(
    flow: FlowTransform,
    base_log_pdf: Callable[[np.ndarray], np.ndarray],
    x,
) -> np.ndarray:
    """Change-of-variables log-density ``base(T(x)) + log|det dT/dx|``."""
    z, ld = flow_forward(flow, x)
    return base_log_pdf(z) + ld
