"""Minimal parameter containers shared by the backbone and the TCN.

A ``Module`` discovers its parameters (``Tensor`` attributes), buffers
(numpy arrays named in ``_buffer_names``) and children (``Module``
attributes or lists of them) by attribute order, so dotted names are stable
and deterministic. Forward passes take ``training``/``rng`` explicitly; no
module carries a mode flag.
"""
from __future__ import annotations

import math
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from . import ops
from .errors import InputError
from .tensor import Tensor, reshape


class Module:
    _buffer_names: Tuple[str, ...] = ()

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + key, value
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key in self._buffer_names:
            yield prefix + key, getattr(self, key)
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if strict and set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise InputError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in state.items():
            target = params[name].data if name in params else buffers.get(name)
            if target is None:
                continue
            if target.shape != np.shape(arr):
                raise InputError(f"shape mismatch for {name}: {target.shape} vs {np.shape(arr)}")
            target[...] = arr

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return Tensor(rng.standard_normal(shape) * math.sqrt(2.0 / fan_in), requires_grad=True)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
        )


class Conv3d(Module):
    """Bias-free 3-D convolution (every conv here is preceded by batch norm)."""

    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1, padding=0):
        kernel = ops._triple(kernel)
        self.weight = he_normal(rng, (c_out, c_in) + kernel, c_in * int(np.prod(kernel)))
        self.stride = ops._triple(stride)
        self.padding = ops._triple(padding)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.stride, self.padding)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, std: Optional[float] = None):
        std = math.sqrt(1.0 / c_in) if std is None else std
        self.weight = Tensor(rng.standard_normal((c_out, c_in)) * std, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class CausalConv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int, rng: np.random.Generator):
        self.weight = he_normal(rng, (c_out, c_in, kernel_size), c_in * kernel_size)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.dilated_causal_conv1d(x, self.weight, self.dilation)
        return y + reshape(self.bias, (1, -1, 1))


def decays(name: str) -> bool:
    """Whether weight decay applies: conv/affine weights only, never biases
    or batch-norm scale/shift."""
    return name.rsplit(".", 1)[-1] in ("weight", "w1", "w2")
