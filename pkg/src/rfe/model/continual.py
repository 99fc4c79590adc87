"""The evolving model: extractor, per-task heads and the retrospector chain."""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, MissingHeadError
from ..tensor_core import Tensor
from .extractors import AuxiliaryExtractor, build_extractor
from .nn import Linear, Module
from .retrospector import (
    RETROSPECTOR_KINDS,
    Retrospector,
    aux_parameter_count,
    build_variant_retrospector,
    retrospector_parameter_count,
)


@dataclass
class ModelConfig:
    input_shape: tuple
    extractor: str = "mlp"
    dim_f: int = 512
    dim_h: int = 128
    joint_dim: int = 128
    retrospector: str = "gated"
    hidden: tuple = (256, 256)
    aux_channels: int = 64

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.hidden = tuple(int(v) for v in self.hidden)
        if self.retrospector not in RETROSPECTOR_KINDS:
            raise ConfigError(f"model.retrospector must be one of {RETROSPECTOR_KINDS}, got {self.retrospector!r}")
        for name in ("dim_f", "dim_h", "joint_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.retrospector == "gated" and self.joint_dim > self.dim_f // 2:
            raise ConfigError(f"model.joint_dim={self.joint_dim} must be at most dim_f/2={self.dim_f // 2}")


class ClassifierHeads(Module):
    """One affine head per task, stored as attributes ``task1``, ``task2``, ..."""

    def add(self, task: int, n_classes: int, dim_f: int, rng: np.random.Generator) -> Linear:
        head = Linear(dim_f, n_classes, rng)
        setattr(self, f"task{task}", head)
        return head

    def __getitem__(self, task: int) -> Linear:
        head = vars(self).get(f"task{task}")
        if head is None:
            raise MissingHeadError(f"no classifier head for task {task}")
        return head

    def __contains__(self, task: int) -> bool:
        return f"task{task}" in vars(self)

    def __len__(self) -> int:
        return sum(1 for k in vars(self) if k.startswith("task"))

    def tasks(self) -> list[int]:
        return sorted(int(k[4:]) for k in vars(self) if k.startswith("task"))


class ContinualModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.extractor = build_extractor(config.extractor, config.input_shape, config.dim_f, self.rng, config.hidden)
        self.heads = ClassifierHeads()
        self.retrospectors: dict[int, Retrospector] = {}
        # h_{t+1}, distilled right after task t and consumed when r_{t+1} is built
        self.pending_aux: dict[int, AuxiliaryExtractor] = {}
        self.prev_extractor: Optional[Module] = None
        self.task_classes: list[tuple[int, ...]] = []

    @property
    def n_tasks(self) -> int:
        return len(self.task_classes)

    @property
    def dim_f(self) -> int:
        return self.config.dim_f

    def add_task(self, classes: Sequence[int]) -> Linear:
        self.task_classes.append(tuple(int(c) for c in classes))
        return self.heads.add(self.n_tasks, len(classes), self.config.dim_f, self.rng)

    def n_classes(self) -> int:
        return sum(len(c) for c in self.task_classes)

    def class_offset(self, task: int) -> int:
        return sum(len(c) for c in self.task_classes[: task - 1])

    def new_aux(self) -> AuxiliaryExtractor:
        return AuxiliaryExtractor(self.config.input_shape, self.config.dim_h, self.rng, self.config.aux_channels)

    def new_retrospector(self, aux: AuxiliaryExtractor) -> Retrospector:
        return build_variant_retrospector(self.config.retrospector, aux, self.config.dim_f,
                                          self.config.joint_dim, self.rng)

    def snapshot_extractor(self) -> Module:
        snap = copy.deepcopy(self.extractor)
        snap.freeze()
        return snap

    # -- forward passes

    def extract(self, x: Tensor) -> Tensor:
        return self.extractor(x)

    def classify(self, feature: Tensor, task: int) -> Tensor:
        return self.heads[task](feature)

    # -- parameters and checkpoints

    def named_parameters(self):
        yield from self.extractor.named_parameters("f.")
        yield from self.heads.named_parameters("w.")
        for t in sorted(self.retrospectors):
            yield from self.retrospectors[t].named_parameters(f"r.task{t}.")
        for t in sorted(self.pending_aux):
            yield from self.pending_aux[t].named_parameters(f"h.task{t}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def parameter_counts(self) -> dict[str, int]:
        cfg = self.config
        aux = aux_parameter_count(cfg.input_shape, cfg.dim_h, cfg.aux_channels)
        counts = {
            "extractor": self.extractor.num_parameters(),
            "heads": self.heads.num_parameters(),
            "retrospector_each": retrospector_parameter_count(cfg.retrospector, cfg.dim_f, cfg.dim_h,
                                                              cfg.joint_dim, aux),
            "retrospector_aux_each": aux,
            "retrospectors_total": sum(r.num_parameters() for r in self.retrospectors.values()),
        }
        counts["inference_total"] = counts["extractor"] + counts["heads"] + counts["retrospectors_total"]
        return counts

    @classmethod
    def from_state(cls, config: ModelConfig, task_classes: Sequence[Sequence[int]], state: dict,
                   n_tasks: Optional[int] = None) -> "ContinualModel":
        """Rebuild the architecture implied by parameter names, then load values."""
        model = cls(config, seed=0)
        heads = sorted({int(m.group(1)) for k in state if (m := re.match(r"w\.task(\d+)\.", k))})
        n = n_tasks if n_tasks is not None else len(heads)
        for t in range(1, n + 1):
            model.add_task(task_classes[t - 1])
        for t in sorted({int(m.group(1)) for k in state if (m := re.match(r"r\.task(\d+)\.", k))}):
            model.retrospectors[t] = model.new_retrospector(model.new_aux())
            model.retrospectors[t].aux.freeze()
        for t in sorted({int(m.group(1)) for k in state if (m := re.match(r"h\.task(\d+)\.", k))}):
            model.pending_aux[t] = model.new_aux()
            model.pending_aux[t].freeze()
        params = dict(model.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()
        return model


def extract(model: ContinualModel, x: Tensor) -> Tensor:
    return model.extract(x)


def classify(model: ContinualModel, feature: Tensor, task: int) -> Tensor:
    return model.classify(feature, task)
