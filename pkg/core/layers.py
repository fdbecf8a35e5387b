"""
Layer building blocks on top of the tensor core
"""
from typing import Iterator, List, Optional, Tuple

import numpy as np

from core import tensor as tc
from core.tensor import Parameter, Tensor


class RngHolder:
    """Shared, swappable generator so dropout and Gumbel noise draw from one stream"""

    def __init__(self, seed: int):
        self.generator = tc.make_rng(seed)

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state


class Module:
    """Container that discovers parameters and sub-modules from its attributes"""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            for child in _children(value):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        tc.zero_grad(self.parameters())

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name


def _walk(value, name: str) -> Iterator[Tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


def _children(value) -> Iterator[Module]:
    if isinstance(value, Module):
        yield value
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _children(item)


class Linear(Module):
    """y = x W + b with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero bias"""

    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int, bias: bool = True):
        self.weight = Parameter(tc.uniform_init(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = tc.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = Parameter(np.ones(width))
        self.bias = Parameter(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gain, self.bias)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, vocab_size: int, width: int):
        self.table = Parameter(tc.uniform_init(rng, (vocab_size, width), width))

    def __call__(self, indices) -> Tensor:
        return tc.gather_rows(self.table, indices)


class Dropout(Module):
    def __init__(self, rate: float, rng: RngHolder):
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return tc.dropout(x, self.rate, self.rng.generator, self.training)


def freeze_to_zero(module: Module, names: Optional[List[str]] = None) -> None:
    """Set parameters (all, or those whose name contains one of names) to zero in place"""
    for name, p in module.named_parameters():
        if names is None or any(n in name for n in names):
            p.data = np.zeros_like(p.data)
