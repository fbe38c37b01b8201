"""Trainable layers: dense, convolution and batch normalization."""
from __future__ import annotations

import enum
import math
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Parameter, Tensor


class LayerMode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class BatchSizeError(ValueError):
    pass


class Module:
    """Tiny parameter container.

    Parameters are ``Parameter`` attributes; child modules
    are ``Module`` attributes or lists of modules. Iteration order follows
    attribute assignment order, which keeps checkpoints stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense(Module):
    def __init__(self, d_in: int, d_out: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(kaiming_uniform(rng, (d_in, d_out), d_in))
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(x, self.weight, self.bias)


def dense_forward(x, weight, bias) -> Tensor:
    """Affine map ``x @ W + b`` for a batch of row vectors."""
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense input {x.shape} does not match weights {weight.shape}")
    return ad.matmul(x, weight) + bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros((1, c_out, 1, 1))) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.weight, self.stride, self.padding)
        return out + self.bias if self.bias is not None else out


class BatchNorm(Module):
    """State of one batch-normalization branch.

    Holds the affine parameters ``gamma``/``beta`` (trainable) and the running
    mean/variance (buffers) for ``channels`` channels. ``xi`` is the variance
    offset and ``alpha`` the running-average update factor.
    """

    def __init__(self, channels: int, xi: float = 1e-5, alpha: float = 0.1):
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.xi = float(xi)
        self.alpha = float(alpha)
        self.num_batches_seen = 0

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    def update_running(self, batch_mean: np.ndarray, batch_var: np.ndarray):
        a = self.alpha
        self.running_mean = (1.0 - a) * self.running_mean + a * batch_mean
        self.running_var = (1.0 - a) * self.running_var + a * batch_var
        self.num_batches_seen += 1

    def state_arrays(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor, mode: LayerMode) -> Tensor:
        return bn_forward(x, self, mode)


def _channel_view(x: Tensor) -> tuple:
    # broadcast shape of a per-channel vector and the reduction axes
    if x.ndim == 2:
        return (1, x.shape[1]), (0,)
    if x.ndim == 4:
        return (1, x.shape[1], 1, 1), (0, 2, 3)
    raise DimensionError(f"batch norm expects 2-D or 4-D input, got {x.shape}")


def batch_moments(x: np.ndarray) -> tuple:
    """Per-channel mean and biased variance over all non-channel axes."""
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    mu = x.mean(axis=axes)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    var = ((x - mu.reshape(shape)) ** 2).mean(axis=axes)
    return mu, var


def bn_forward(x, state: BatchNorm, mode: LayerMode) -> Tensor:
    """Normalize ``x`` per channel with ``state``.

    TRAIN standardizes with the biased batch moments and folds them into the
    running averages; EVAL uses the running averages and leaves ``state``
    untouched.
    """
    x = ad.as_tensor(x)
    view, axes = _channel_view(x)
    if x.shape[1] != state.channels:
        raise DimensionError(f"input has {x.shape[1]} channels, branch has {state.channels}")
    gamma = ad.reshape(state.gamma, view)
    beta = ad.reshape(state.beta, view)
    if mode is LayerMode.TRAIN:
        if x.shape[0] < 2:
            raise BatchSizeError(f"training-mode batch norm needs >= 2 samples, got {x.shape[0]}")
        mu = ad.mean(x, axis=axes, keepdims=True)
        centered = x - mu
        var = ad.mean(centered * centered, axis=axes, keepdims=True)
        out = gamma * (centered / ad.sqrt(var + state.xi)) + beta
        state.update_running(mu.data.reshape(-1), var.data.reshape(-1))
        return out
    mean_ = state.running_mean.reshape(view)
    inv_std = 1.0 / np.sqrt(state.running_var.reshape(view) + state.xi)
    return gamma * ((x - mean_) * inv_std) + beta
