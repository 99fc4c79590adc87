"""Retrospector units: map task-t features back toward the task t-1 feature space."""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ConfigError, DimensionError
from ..tensor_core import Tensor, ops
from .extractors import AuxiliaryExtractor
from .nn import Linear, Module

RETROSPECTOR_KINDS = ("gated", "mlp_projection", "mlp_residual")


class Retrospector(Module):
    """Gated blend of the drifted feature and a projected auxiliary feature.

    The joint code ``a = a_f(f) * a_h(h)`` drives two sigmoid gates; the
    output is ``g_f(a) * f + g_h(a) * b(h)``.
    """

    kind = "gated"

    def __init__(self, aux: AuxiliaryExtractor, dim_f: int, d: int, rng: np.random.Generator):
        dim_h = aux.dim_h
        if d > dim_f // 2:
            raise ConfigError(f"joint dimension {d} must be at most half of dim(f)={dim_f}")
        self.dim_f = dim_f
        self.dim_h = dim_h
        self.d = d
        self.aux = aux
        self.a_f = Linear(dim_f, d, rng)
        self.a_h = Linear(dim_h, d, rng)
        self.b = Linear(dim_h, dim_f, rng)
        self.g_f = Linear(d, dim_f, rng)
        self.g_h = Linear(d, dim_f, rng)

    def trainable_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        """Everything except the auxiliary extractor."""
        return {k: p for k, p in self.named_parameters(prefix) if not k[len(prefix):].startswith("aux.")}

    def _check_feature(self, f_x: Tensor) -> None:
        if f_x.shape[-1] != self.dim_f or f_x.ndim not in (1, 2):
            raise DimensionError(f"feature of shape {f_x.shape} does not match dim(f)={self.dim_f}")

    def joint_encode(self, f_x: Tensor, h_x: Tensor) -> Tensor:
        self._check_feature(f_x)
        if h_x.shape[-1] != self.dim_h:
            raise DimensionError(f"auxiliary feature {h_x.shape} does not match dim(h)={self.dim_h}")
        return ops.mul(self.a_f(f_x), self.a_h(h_x))

    def gates(self, f_x: Tensor, h_x: Tensor) -> tuple[Tensor, Tensor]:
        a = self.joint_encode(f_x, h_x)
        return ops.sigmoid(self.g_f(a)), ops.sigmoid(self.g_h(a))

    def rectify(self, f_x: Tensor, x: Optional[Tensor] = None, h_x: Optional[Tensor] = None) -> Tensor:
        """``h_x`` may be passed precomputed since the auxiliary extractor is frozen."""
        self._check_feature(f_x)
        if h_x is None:
            h_x = self.aux(x)
        gate_f, gate_h = self.gates(f_x, h_x)
        return ops.add(ops.mul(gate_f, f_x), ops.mul(gate_h, self.b(h_x)))

    __call__ = rectify


class MLPRetrospector(Retrospector):
    """Concatenate ``[f, h]`` and apply a two-layer ReLU MLP of width dim(f);
    the residual kind adds ``f`` to the MLP output."""

    def __init__(self, kind: str, aux: AuxiliaryExtractor, dim_f: int, rng: np.random.Generator,
                 zero_output: bool = False):
        if kind not in ("mlp_projection", "mlp_residual"):
            raise ConfigError(f"unknown MLP retrospector kind {kind!r}")
        self.kind = kind
        self.dim_f = dim_f
        self.dim_h = aux.dim_h
        self.aux = aux
        self.mlp1 = Linear(dim_f + aux.dim_h, dim_f, rng)
        self.mlp2 = Linear(dim_f, dim_f, rng, zero=zero_output)

    def joint_encode(self, f_x, h_x):
        raise NotImplementedError("MLP retrospectors have no joint code")

    def rectify(self, f_x: Tensor, x: Optional[Tensor] = None, h_x: Optional[Tensor] = None) -> Tensor:
        self._check_feature(f_x)
        if h_x is None:
            h_x = self.aux(x)
        out = self.mlp2(ops.relu(self.mlp1(ops.concat([f_x, h_x], axis=-1))))
        if self.kind == "mlp_residual":
            out = ops.add(out, f_x)
        return out

    __call__ = rectify


def build_variant_retrospector(kind: str, aux: AuxiliaryExtractor, dim_f: int, d: int,
                               rng: np.random.Generator) -> Retrospector:
    if kind == "gated":
        return Retrospector(aux, dim_f, d, rng)
    if kind in ("mlp_projection", "mlp_residual"):
        return MLPRetrospector(kind, aux, dim_f, rng)
    raise ConfigError(f"unknown retrospector kind {kind!r}; expected one of {RETROSPECTOR_KINDS}")


def aux_parameter_count(input_shape, dim_h: int, hidden_channels: int = 64) -> int:
    if len(input_shape) == 3:
        c = input_shape[0]
        return (c * hidden_channels * 9 + hidden_channels) + (hidden_channels * dim_h * 9 + dim_h)
    return input_shape[0] * dim_h + dim_h


def retrospector_parameter_count(kind: str, dim_f: int, dim_h: int, d: int, aux_count: int = 0) -> int:
    """Closed-form count; pass ``aux_count`` to include the auxiliary extractor."""
    if kind == "gated":
        a_f = dim_f * d + d
        a_h = dim_h * d + d
        b = dim_h * dim_f + dim_f
        gate = d * dim_f + dim_f
        return a_f + a_h + b + 2 * gate + aux_count
    if kind in ("mlp_projection", "mlp_residual"):
        return ((dim_f + dim_h) * dim_f + dim_f) + (dim_f * dim_f + dim_f) + aux_count
    raise ConfigError(f"unknown retrospector kind {kind!r}")
