"""Parameter containers: Module, Linear, MLP, LayerNorm."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Walks its attributes (in assignment order) to find parameters."""

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Tensor]]:
        # shared submodules/tensors are reported once, under their first name
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                if id(value) not in seen:
                    seen.add(id(value))
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        # He init for the ReLU stacks
        self.weight = param(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)))
        self.bias = param(np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        return nx.add(nx.matmul(x, self.weight), self.bias)


class MLP(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, final_relu: bool = False):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.final_relu = final_relu

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = nx.relu(x)
        return x


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = param(np.ones(width))
        self.bias = param(np.zeros(width))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)
