"""Experiment configuration: sectioned INI text with typed, validated keys.

Grammar: standard ``configparser`` syntax. Only the sections and keys in
:data:`SCHEMA` are accepted; any key may be omitted and takes its default.
Booleans accept true/false/yes/no/on/off/1/0, integer tuples are written
comma-separated (``hidden = 256,256``). Overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .engine import STRATEGY_KINDS, StrategyConfig, TrainConfig
from .errors import ConfigError
from .model import ModelConfig

_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


def _int(s: str) -> int:
    return int(s)


def _float(s: str) -> float:
    return float(s)


def _bool(s: str) -> bool:
    if s.lower() not in _BOOL:
        raise ValueError(f"not a boolean: {s!r}")
    return _BOOL[s.lower()]


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _str(s: str) -> str:
    return s


def _opt_int(s: str) -> Optional[int]:
    return None if s.strip() in ("", "auto") else int(s)


# section -> key -> (parser, default text)
SCHEMA = {
    "stream": {
        "source": (_str, "blob"),
        "path": (_str, ""),
        "n_tasks": (_int, "5"),
        "classes_per_task": (_int, "2"),
        "dim": (_int, "20"),
        "samples_per_class": (_int, "200"),
        "test_per_class": (_opt_int, "auto"),
        "separation": (_float, "3.0"),
        "drift": (_float, "1.0"),
        "noise": (_float, "1.0"),
        "standardize": (_bool, "true"),
    },
    "model": {
        "extractor": (_str, "mlp"),
        "dim_f": (_int, "512"),
        "dim_h": (_int, "128"),
        "joint_dim": (_int, "128"),
        "retrospector": (_str, "gated"),
        "hidden": (_ints, "256,256"),
        "aux_channels": (_int, "64"),
    },
    "strategy": {
        "kind": (_str, "rfe"),
        "capacity": (_int, "0"),
        "alpha": (_float, "1.0"),
        "end_to_end": (_bool, "false"),
    },
    "training": {
        "epochs": (_int, "40"),
        "aux_epochs": (_int, "40"),
        "retro_epochs": (_int, "40"),
        "lr": (_float, "5e-4"),
        "aux_lr": (_float, "5e-3"),
        "retro_lr": (_float, "5e-3"),
        "batch_size": (_int, "32"),
        "patience": (_int, "3"),
        "lr_decay": (_float, "0.1"),
    },
    "evaluation": {
        "til": (_bool, "true"),
        "cil": (_bool, "true"),
        "rectify": (_bool, "true"),
        "rmse": (_bool, "false"),
        "pca": (_bool, "false"),
        "pca_task": (_int, "1"),
    },
    "experiment": {
        "seed": (_int, "0"),
        "out": (_str, "runs/default"),
    },
}

EXPERIMENT_KINDS = STRATEGY_KINDS + ("oracle",)

# Desk-scale 5-task blob benchmark used by the acceptance suite.
BLOB_BENCHMARK = """\
[stream]
source = blob
n_tasks = 5
classes_per_task = 2
dim = 20
samples_per_class = 200
separation = 3.0
drift = 1.0

[model]
extractor = mlp
dim_f = 64
dim_h = 16
joint_dim = 16
hidden = 64,64

[strategy]
kind = rfe
alpha = 0.1

[training]
epochs = 40
aux_epochs = 40
retro_epochs = 40
lr = 3e-2
aux_lr = 5e-3
retro_lr = 5e-3

[evaluation]
cil = false
"""

# Intermediate drift used for two-task rectification checks.
MODERATE_DRIFT = 0.5


@dataclass
class ExperimentConfig:
    values: dict  # section -> key -> parsed value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["experiment"]["seed"]

    @property
    def kind(self) -> str:
        return self.values["strategy"]["kind"]

    @property
    def oracle(self) -> bool:
        return self.kind == "oracle"

    # -- construction

    @classmethod
    def from_text(cls, text: str = "", overrides: Iterable[str] = (), seed: Optional[int] = None) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config syntax: {exc}") from exc
        raw = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                raw[section][key] = value
        for item in overrides:
            section, key, value = _split_override(item)
            raw[section][key] = value
        if seed is not None:
            raw["experiment"]["seed"] = str(seed)
        values = {}
        for section, keys in SCHEMA.items():
            values[section] = {}
            for key, (parse, _) in keys.items():
                text_value = raw[section][key].strip()
                try:
                    values[section][key] = parse(text_value)
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: cannot parse {text_value!r} ({exc})") from None
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides: Iterable[str] = (), seed: Optional[int] = None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(), overrides, seed)

    def validate(self) -> None:
        st = self["stream"]
        if st["source"] not in ("blob", "file"):
            raise ConfigError("stream.source must be 'blob' or 'file'")
        if st["source"] == "file" and not st["path"]:
            raise ConfigError("stream.path is required when stream.source = file")
        if self["model"]["extractor"] not in ("mlp", "conv"):
            raise ConfigError("model.extractor must be 'mlp' or 'conv'")
        if st["n_tasks"] < 1:
            raise ConfigError("stream.n_tasks must be at least 1")
        kind = self.kind.lower().replace("-", "_")
        if kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"strategy.kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        self["strategy"]["kind"] = kind
        if self["experiment"]["seed"] < 0:
            raise ConfigError("experiment.seed must be non-negative")
        ev = self["evaluation"]
        if not 1 <= ev["pca_task"] <= st["n_tasks"]:
            raise ConfigError(f"evaluation.pca_task must lie in 1..{st['n_tasks']}")
        # builders validate the remaining fields
        self.strategy_config()
        self.train_config()
        self.model_config((1,) if self["model"]["extractor"] == "mlp" else (3, 16, 16))

    # -- typed views

    def strategy_config(self) -> StrategyConfig:
        s = self["strategy"]
        if self.oracle:
            return StrategyConfig("finetune", 0, 0.0, False)
        return StrategyConfig(s["kind"], s["capacity"], s["alpha"], s["end_to_end"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self["training"])

    def model_config(self, input_shape: tuple) -> ModelConfig:
        return ModelConfig(tuple(input_shape), **self["model"])

    def canonical(self) -> dict:
        """JSON-ready mapping with sorted keys; the basis of the config hash."""
        out = {}
        for section in sorted(self.values):
            out[section] = {k: list(v) if isinstance(v, tuple) else v
                            for k, v in sorted(self.values[section].items())}
        return out

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def to_text(self) -> str:
        lines = []
        for section, keys in self.canonical().items():
            lines.append(f"[{section}]")
            for k, v in keys.items():
                if isinstance(v, list):
                    v = ",".join(str(i) for i in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                elif v is None:
                    v = "auto"
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _split_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    lhs, value = item.split("=", 1)
    if "." not in lhs:
        raise ConfigError(f"override key {lhs!r} is not of the form section.key")
    section, key = lhs.strip().split(".", 1)
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}] in override")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {section}.{key} in override")
    return section, key, value
