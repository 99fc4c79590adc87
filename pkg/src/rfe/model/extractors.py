"""Main and auxiliary feature extractors."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ConfigError, DimensionError
from ..tensor_core import Tensor, ops
from .nn import Conv2d, Linear, Module


def check_input(x: Tensor, input_shape: tuple) -> None:
    """Accept a single sample or a batch of samples of ``input_shape``."""
    n = len(input_shape)
    if tuple(x.shape[-n:]) != tuple(input_shape) or x.ndim not in (n, n + 1):
        raise DimensionError(f"input of shape {x.shape} does not match configured shape {input_shape}")


class MLPExtractor(Module):
    def __init__(self, input_dim: int, dim_f: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (256, 256), final_relu: bool = False):
        self.input_shape = (input_dim,)
        self.dim_f = dim_f
        self.final_relu = final_relu
        widths = [input_dim, *hidden, dim_f]
        self.n_layers = len(widths) - 1
        for i in range(self.n_layers):
            setattr(self, f"layer{i}", Linear(widths[i], widths[i + 1], rng))

    def __call__(self, x: Tensor) -> Tensor:
        check_input(x, self.input_shape)
        for i in range(self.n_layers):
            x = getattr(self, f"layer{i}")(x)
            if i < self.n_layers - 1 or self.final_relu:
                x = ops.relu(x)
        return x


class ConvExtractor(Module):
    """Two stride-2 3x3 convolutions, global average pooling, then an affine
    map to ``dim_f``."""

    def __init__(self, input_shape: Sequence[int], dim_f: int, rng: np.random.Generator,
                 channels: Sequence[int] = (32, 64)):
        if len(input_shape) != 3:
            raise ConfigError(f"conv extractor needs a (C, H, W) input shape, got {tuple(input_shape)}")
        self.input_shape = tuple(input_shape)
        self.dim_f = dim_f
        c1, c2 = channels
        self.conv0 = Conv2d(input_shape[0], c1, 3, rng, stride=2, padding=1)
        self.conv1 = Conv2d(c1, c2, 3, rng, stride=2, padding=1)
        self.layer0 = Linear(c2, dim_f, rng)

    def __call__(self, x: Tensor) -> Tensor:
        check_input(x, self.input_shape)
        single = x.ndim == 3
        if single:
            x = ops.reshape(x, (1, *x.shape))
        x = ops.relu(self.conv0(x))
        x = ops.relu(self.conv1(x))
        x = self.layer0(ops.global_avgpool(x))
        return ops.reshape(x, (self.dim_f,)) if single else x


class AuxiliaryExtractor(Module):
    """Weak, low-capacity extractor distilled from the previous main extractor.

    Image inputs are max-pooled down to 16x16, then pass through
    conv(3x3, s2, p1) -> ReLU -> maxpool(2) -> conv(3x3, s2, p1) -> ReLU ->
    maxpool(2), ending at 1x1 spatial size with ``dim_h`` channels. Vector
    inputs go through one affine layer of width ``dim_h`` and a ReLU.
    """

    def __init__(self, input_shape: Sequence[int], dim_h: int, rng: np.random.Generator,
                 hidden_channels: int = 64):
        self.input_shape = tuple(input_shape)
        self.dim_h = dim_h
        if len(self.input_shape) == 3:
            c, h, w = self.input_shape
            if h % 16 or w % 16 or h // 16 != w // 16:
                raise ConfigError(f"auxiliary extractor needs square inputs with side divisible by 16, got {h}x{w}")
            self.downsample = h // 16
            self.conv1 = Conv2d(c, hidden_channels, 3, rng, stride=2, padding=1)
            self.conv2 = Conv2d(hidden_channels, dim_h, 3, rng, stride=2, padding=1)
        elif len(self.input_shape) == 1:
            self.downsample = 0
            self.fc = Linear(self.input_shape[0], dim_h, rng)
        else:
            raise ConfigError(f"unsupported input shape {self.input_shape}")

    def spatial_sizes(self) -> list[int]:
        """Side length after each stage of the image path."""
        side = self.input_shape[1] // self.downsample
        sizes = [side]
        side = self.conv1.output_size(side)
        sizes.append(side)
        side //= 2
        sizes.append(side)
        side = self.conv2.output_size(side)
        sizes.append(side)
        side //= 2
        sizes.append(side)
        return sizes

    def __call__(self, x: Tensor) -> Tensor:
        check_input(x, self.input_shape)
        if not self.downsample:
            return ops.relu(self.fc(x))
        single = x.ndim == 3
        if single:
            x = ops.reshape(x, (1, *x.shape))
        if self.downsample > 1:
            x = ops.maxpool2d(x, self.downsample, self.downsample)
        x = ops.maxpool2d(ops.relu(self.conv1(x)), 2, 2)
        x = ops.maxpool2d(ops.relu(self.conv2(x)), 2, 2)
        x = ops.flatten(x)
        if x.shape[1] != self.dim_h:
            raise DimensionError(f"auxiliary output has {x.shape[1]} features, expected {self.dim_h}")
        return ops.reshape(x, (self.dim_h,)) if single else x


def build_extractor(kind: str, input_shape: Sequence[int], dim_f: int, rng: np.random.Generator,
                    hidden: Sequence[int] = (256, 256)) -> Module:
    if kind == "mlp":
        if len(input_shape) != 1:
            raise ConfigError("mlp extractor needs a vector input")
        return MLPExtractor(input_shape[0], dim_f, rng, hidden=hidden)
    if kind == "conv":
        return ConvExtractor(input_shape, dim_f, rng)
    raise ConfigError(f"unknown extractor kind {kind!r}")
