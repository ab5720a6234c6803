"""Fully connected networks on top of the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor

_ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


class MLP:
    """Dense network ``in -> hidden... -> out`` with a linear output layer.

    Hidden layers use Kaiming-uniform weights and zero biases.  The output
    layer is zero-initialized unless ``zero_output=False``; ``output_bias``
    overrides the final bias.
    """

    def __init__(
        self,
        store: ParameterStore,
        prefix: str,
        n_in: int,
        hidden: list[int],
        n_out: int,
        rng: np.random.Generator,
        activation: str = "relu",
        zero_output: bool = True,
        output_bias=None,
    ):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        self.n_in, self.n_out = n_in, n_out
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        sizes = [n_in, *hidden, n_out]
        last = len(sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == last and zero_output:
                w = np.zeros((fan_in, fan_out))
            else:
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = np.zeros(fan_out)
            if i == last and output_bias is not None:
                b = np.asarray(output_bias, dtype=np.float64).reshape(fan_out)
            self.weights.append(store.add(f"{prefix}.w{i}", w))
            self.biases.append(store.add(f"{prefix}.b{i}", b))

    def __call__(self, x) -> Tensor:
        act = _ACTIVATIONS[self.activation]
        h = ad.as_tensor(x)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(h, w) + b
            if i < n - 1:
                h = act(h)
        return h
