"""Parameter containers for the small networks used by the renderer."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero_init: bool = False):
        bound = 1 / np.sqrt(n_in)
        if zero_init:
            self.weight = Tensor(np.zeros((n_in, n_out)), requires_grad=True)
            self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        else:
            self.weight = _uniform(rng, (n_in, n_out), bound)
            self.bias = _uniform(rng, (n_out,), bound)

    def forward(self, x: Tensor) -> Tensor:
        return ops.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3,
                 stride: int = 1, zero_init: bool = False):
        self.stride = stride
        self.padding = kernel // 2
        if zero_init:
            self.weight = Tensor(np.zeros((c_out, c_in, kernel, kernel)), requires_grad=True)
            self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        else:
            bound = 1 / np.sqrt(c_in * kernel * kernel)
            self.weight = _uniform(rng, (c_out, c_in, kernel, kernel), bound)
            self.bias = _uniform(rng, (c_out,), bound)

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class MLP(Module):
    """Fully connected stack with ELU between layers and a linear head."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ops.elu(layer(x))
        return self.layers[-1](x)
