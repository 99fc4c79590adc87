"""In-memory experiment runs driven by an :class:`ExperimentConfig`."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import ExperimentConfig
from .data import TaskStream, make_blob_stream, split_labeled_file
from .engine import LossRecord, Trainer, learn_task, train_joint
from .inference import evaluate
from .metrics import AccuracyMatrix, PCAResult, average_accuracy, feature_rmse, pca_export, representation
from .model import ContinualModel
from .tensor_core import Tensor


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    st = cfg["stream"]
    if st["source"] == "blob":
        stream = make_blob_stream(st["n_tasks"], st["classes_per_task"], st["dim"], st["samples_per_class"],
                                  st["separation"], st["drift"], cfg.seed, noise=st["noise"],
                                  test_per_class=st["test_per_class"])
    else:
        stream = split_labeled_file(st["path"], st["n_tasks"], cfg.seed)
    return stream.standardize() if st["standardize"] else stream


def build_model(cfg: ExperimentConfig, stream: TaskStream) -> ContinualModel:
    return ContinualModel(cfg.model_config(stream.input_shape), seed=cfg.seed)


def settings_of(cfg: ExperimentConfig) -> tuple:
    ev = cfg["evaluation"]
    return tuple(s for s, on in (("TIL", ev["til"]), ("CIL", ev["cil"])) if on)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    stream: TaskStream
    model: ContinualModel
    accuracy: dict                     # setting -> AccuracyMatrix
    records: list = field(default_factory=list)   # final-state EvalRecords
    cil_probs: dict = field(default_factory=dict)
    states: dict = field(default_factory=dict)    # task -> model snapshot (only when requested)
    rmse: list = field(default_factory=list)
    pca: Optional[PCAResult] = None
    log: list = field(default_factory=list)

    def average(self, setting: str = "TIL") -> float:
        """Average accuracy over all tasks after the last task."""
        return average_accuracy(self.accuracy[setting], self.stream.n_tasks)


def record_row(result_acc: dict, accuracy: dict, row: int) -> None:
    for setting, per_task in accuracy.items():
        for j, v in per_task.items():
            result_acc[setting][row, j] = v


def pca_groups(final: ContinualModel, original_extractor, x: np.ndarray, task: int) -> dict:
    return {
        "original": original_extractor(Tensor(x)).data,
        "drifted": representation(final, x, task, False),
        "rectified": representation(final, x, task, True),
    }


def run_experiment(cfg: ExperimentConfig, stream: Optional[TaskStream] = None,
                   on_record: Optional[Callable[[LossRecord], None]] = None,
                   keep_states: Optional[bool] = None, workers: int = 1) -> ExperimentResult:
    """Train over the stream, evaluating after every task.

    ``keep_states`` keeps a deep copy of the model after each task; it
    defaults to whether RMSE or PCA reports are enabled.
    """
    stream = build_stream(cfg) if stream is None else stream
    ev = cfg["evaluation"]
    settings = settings_of(cfg)
    if keep_states is None:
        keep_states = ev["rmse"] or ev["pca"]
    model = build_model(cfg, stream)
    trainer = Trainer(cfg.strategy_config(), cfg.train_config(), on_record=on_record)
    n = stream.n_tasks
    acc = {s: AccuracyMatrix(n, setting=s) for s in settings}
    states = {}
    rectify = ev["rectify"] and not cfg.oracle
    if cfg.oracle:
        train_joint(model, stream, trainer)
    else:
        for data in stream:
            learn_task(model, data, trainer)
            if data.task < n:
                a, _, _ = evaluate(model, stream, settings, rectify=rectify, workers=workers)
                record_row(acc, a, data.task)
            if keep_states:
                states[data.task] = copy.deepcopy(model)
    a, records, cil_probs = evaluate(model, stream, settings, rectify=rectify, workers=workers)
    record_row(acc, a, n)
    result = ExperimentResult(cfg, stream, model, acc, records, cil_probs, states, log=trainer.log)
    if not cfg.oracle and ev["rmse"]:
        result.rmse = [feature_rmse(states, stream, False), feature_rmse(states, stream, True)]
    if not cfg.oracle and ev["pca"]:
        j = ev["pca_task"]
        groups = pca_groups(model, states[j].extractor, stream[j].x_test, j)
        result.pca = pca_export(groups, k=2, seed=cfg.seed)
    return result
