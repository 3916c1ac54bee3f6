"""Layers built on the autodiff tape."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    """Parameter container; submodules and Parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item
            elif isinstance(val, dict):
                for k in sorted(val):
                    item = val[k]
                    if isinstance(item, Parameter):
                        yield f"{name}.{k}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def name_parameters(self) -> None:
        for name, p in self.named_parameters():
            p.name = name


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero_init: bool = False):
        bound = np.sqrt(6.0 / n_in)  # He-uniform
        w = np.zeros((n_in, n_out)) if zero_init else rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ad.ShapeError(f"linear: input width {x.shape[-1]} != {self.weight.shape[0]}")
        lead = x.shape[:-1]
        y = ad.matmul(ad.reshape(x, (-1, x.shape[-1])), self.weight) + self.bias
        return ad.reshape(y, lead + (self.weight.shape[1],))


class MLP(Module):
    """ReLU MLP with ``depth`` hidden layers of ``width`` channels and a linear output."""

    def __init__(self, n_in: int, n_out: int, width: int, depth: int, rng: np.random.Generator,
                 zero_last: bool = True):
        dims = [n_in] + [width] * depth
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(dims[-1], n_out, rng, zero_init=zero_last)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = ad.relu(layer(x))
        return self.out(x)
