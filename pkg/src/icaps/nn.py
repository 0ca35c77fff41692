"""Layers, parameter containers and the Adam optimizer."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from icaps import ops
from icaps.tensor import Tensor


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    """Holds parameters and sub-modules as attributes, in declaration order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Parameter(Tensor):
    """A trainable leaf tensor owned by a :class:`Module`."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


parameter = Parameter


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.weight = parameter(he_uniform(rng, (n_in, n_out), n_in))
        self.bias = parameter(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0):
        self.stride, self.padding = stride, padding
        self.weight = parameter(he_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.bias = parameter(np.zeros((1, c_out, 1, 1)))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.padding) + self.bias


class ConvTranspose2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0):
        self.stride, self.padding = stride, padding
        # each output pixel sees about c_in * (kernel / stride)**2 inputs
        fan_in = max(1, c_in * kernel * kernel // (stride * stride))
        self.weight = parameter(he_uniform(rng, (c_in, c_out, kernel, kernel), fan_in))
        self.bias = parameter(np.zeros((1, c_out, 1, 1)))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.stride, self.padding) + self.bias


class Adam:
    """Adam over a fixed list of parameters; state is plain numpy arrays."""

    def __init__(self, params: list[Tensor], lr=2e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - step.astype(p.data.dtype)).astype(p.data.dtype)
