"""Minimal module system: parameter containers and the basic layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .errors import FormatError
from .tensor import Tensor


def parameter(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Parameter container; children and parameters are discovered from attributes.

    Registration order is attribute assignment order, which makes
    ``named_parameters`` (and therefore checkpoints) deterministic.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into existing parameters.

        Raises FormatError listing every missing, unexpected, or
        shape-conflicting tensor name.
        """
        own = dict(self.named_parameters())
        problems = []
        for name, p in own.items():
            if name not in state:
                problems.append(f"missing tensor {name!r}")
            elif tuple(state[name].shape) != p.shape:
                problems.append(f"shape conflict for {name!r}: checkpoint {tuple(state[name].shape)} vs model {p.shape}")
        if strict:
            problems += [f"unexpected tensor {name!r}" for name in state if name not in own]
        if problems:
            raise FormatError("; ".join(problems))
        for name, p in own.items():
            p.data = np.ascontiguousarray(state[name], dtype=p.dtype).copy()


class Linear(Module):
    """Pointwise ``x @ W + b`` over the last axis."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator, dtype=np.float32, std: float = 0.02, zero: bool = False):
        w = np.zeros((din, dout)) if zero else rng.normal(0.0, std, (din, dout))
        self.weight = parameter(w, dtype)
        self.bias = parameter(np.zeros(dout), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel, rng: np.random.Generator, dtype=np.float32,
                 stride=(1, 1, 1), groups: int = 1, bias: bool = True, zero: bool = False):
        kernel = tuple(kernel)
        fan_in = int(np.prod(kernel)) * (cin // groups)
        shape = kernel + (cin // groups, cout)
        k = np.zeros(shape) if zero else rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
        self.kernel = parameter(k, dtype)
        if bias:
            self.bias = parameter(np.zeros(cout), dtype)
        self.stride = tuple(stride)
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        y = ops.conv3d(x, self.kernel, self.stride, "same", self.groups)
        b = getattr(self, "bias", None)
        return y if b is None else ops.add(y, b)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim), dtype)
        self.beta = parameter(np.zeros(dim), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)
