"""Parameter containers: a tiny module system on top of the tape engine."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..tensor_core import Tensor, ops


class Module:
    """Parameters and submodules are discovered from instance attributes in
    assignment order, which fixes both the naming and the serialization
    order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return dict(self.named_parameters(prefix))

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def freeze(self) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = False
            p.grad = None

    def unfreeze(self) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = True

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for _, p in self.named_parameters())

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        if zero:
            self.weight = Tensor(np.zeros((in_features, out_features)), requires_grad=True)
        else:
            self.weight = kaiming_uniform(rng, (in_features, out_features), in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = kaiming_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def output_size(self, size: int) -> int:
        k = self.weight.shape[2]
        return (size + 2 * self.padding - k) // self.stride + 1
