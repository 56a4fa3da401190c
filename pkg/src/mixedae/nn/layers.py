"""Dense and batch-norm layers built on the autodiff graph."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError
from . import autodiff as ad
from .autodiff import Parameter, Tensor

ACTIVATIONS = ("linear", "selu", "softmax")


def lecun_normal(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    """N(0, 1/fan_in) init; keeps SELU stacks self-normalizing."""
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


class Dense:
    """Fully connected layer, optionally sharing transposed weights.

    With ``tied_source`` set, this layer owns no weight matrix of its own: it
    applies the transpose of the source layer's weights, so gradient from
    both uses accumulates into the one shared matrix. Bias is always owned.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        activation: str = "linear",
        rng: np.random.Generator | None = None,
        tied_source: "Dense | None" = None,
        name: str = "dense",
    ):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.name = name
        self.tied_source = tied_source
        if tied_source is not None:
            if (tied_source.in_dim, tied_source.out_dim) != (out_dim, in_dim):
                raise ShapeError(
                    f"tied source for {name}",
                    (out_dim, in_dim),
                    (tied_source.in_dim, tied_source.out_dim),
                )
            self.weight = None
        else:
            if rng is None:
                raise ConfigError(f"layer {name} needs an rng to draw weights")
            self.weight = Parameter(lecun_normal(rng, in_dim, (in_dim, out_dim)), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim), f"{name}.bias")

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name} input", ("n", self.in_dim), x.data.shape)
        w = ad.transpose(self.tied_source.weight) if self.tied_source is not None else self.weight
        z = ad.add(ad.matmul(x, w), self.bias)
        if self.activation == "selu":
            return ad.selu(z)
        if self.activation == "softmax":
            return ad.softmax_rows(z)
        return z

    def parameters(self) -> list[Parameter]:
        ps = [] if self.weight is None else [self.weight]
        return ps + [self.bias]


class BatchNorm:
    """Feature-wise batch normalization with running statistics.

    Train mode normalizes by the minibatch mean and biased variance and, when
    ``update_stats`` is true, folds them into the running averages
    (``running = momentum * running + (1 - momentum) * batch``). Eval mode
    uses the running statistics only.
    """

    def __init__(self, dim: int, momentum: float = 0.99, eps: float = 1e-3, name: str = "bn"):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self.gamma = Parameter(np.ones(dim), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim), f"{name}.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def forward(self, x: Tensor, train: bool, update_stats: bool = True) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != self.dim:
            raise ShapeError(f"{self.name} input", ("n", self.dim), x.data.shape)
        if train:
            if x.data.shape[0] < 2:
                raise ShapeError(f"{self.name} train-mode batch", ">=2 rows", x.data.shape)
            out, mean, var = ad.batchnorm_train(x, self.gamma, self.beta, self.eps)
            if update_stats:
                m = self.momentum
                self.running_mean = m * self.running_mean + (1.0 - m) * mean
                self.running_var = m * self.running_var + (1.0 - m) * var
            return out
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        xhat = ad.mul(ad.sub(x, ad.constant(self.running_mean)), ad.constant(inv))
        return ad.add(ad.mul(xhat, self.gamma), self.beta)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


def dense_forward(layer: Dense, x: np.ndarray) -> np.ndarray:
    """Run a dense layer on a plain array, no gradient recording kept."""
    return layer.forward(Tensor(x)).data


def batchnorm_forward(layer: BatchNorm, x: np.ndarray, train: bool) -> np.ndarray:
    """Run batch norm on a plain array. Train mode updates running stats."""
    return layer.forward(Tensor(x), train=train).data
