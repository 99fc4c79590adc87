"""Chained rectification at inference time (task- and class-incremental)."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import TaskRangeError
from .model import ContinualModel
from .tensor_core import Tensor, masked_softmax


@dataclass
class RectificationTrace:
    """``features[k]`` is the estimate in the domain of ``tasks[k]``; entry 0 is f_N(x)."""

    tasks: list
    features: list

    def __len__(self) -> int:
        return len(self.features)

    def at(self, task: int) -> np.ndarray:
        return self.features[self.tasks.index(task)]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def rectify_chain(model: ContinualModel, x, to_task: int, from_task: int | None = None) -> RectificationTrace:
    """Apply r_N, r_{N-1}, ..., r_{to_task+1} to f_N(x), each step also seeing the raw input."""
    n = model.n_tasks if from_task is None else from_task
    if n != model.n_tasks:
        raise TaskRangeError(f"chains start at the current task {model.n_tasks}, not {n}")
    if not 1 <= to_task <= n:
        raise TaskRangeError(f"target task {to_task} outside 1..{n}")
    x = _as_tensor(x)
    f = model.extract(x)
    tasks, feats = [n], [f.data]
    for j in range(n, to_task, -1):
        f = model.retrospectors[j].rectify(f, x)
        tasks.append(j - 1)
        feats.append(f.data)
    return RectificationTrace(tasks, feats)


def til_predict(model: ContinualModel, x, task: int, rectify: bool = True):
    """Predicted global labels and head logits for samples of a known task.
    Ties go to the lowest class index."""
    head = model.heads[task]
    if rectify:
        feat = rectify_chain(model, x, task).features[-1]
    else:
        feat = model.extract(_as_tensor(x)).data
    logits = head(Tensor(feat)).data
    classes = np.asarray(model.task_classes[task - 1])
    return classes[np.argmax(logits, axis=-1)], logits


def cil_predict(model: ContinualModel, x, rectify: bool = True):
    """Average over all domains of the per-domain softmax, each restricted to
    that domain's classes and zero elsewhere. Returns ``(labels, probs)``
    where columns follow the model's global class layout."""
    n = model.n_tasks
    if rectify:
        trace = rectify_chain(model, x, 1)
    else:
        f = model.extract(_as_tensor(x)).data
        trace = RectificationTrace(list(range(n, 0, -1)), [f] * n)
    single = trace.features[0].ndim == 1
    width = model.n_classes()
    batch = 1 if single else trace.features[0].shape[0]
    total = np.zeros((batch, width))
    for t in range(1, n + 1):
        logits = model.heads[t](Tensor(trace.at(t))).data.reshape(batch, -1)
        off = model.class_offset(t)
        total[:, off:off + logits.shape[1]] += masked_softmax(logits)
    probs = total / n
    layout = np.concatenate([np.asarray(c) for c in model.task_classes])
    labels = layout[np.argmax(probs, axis=1)]
    return (labels[0], probs[0]) if single else (labels, probs)


@dataclass
class EvalRecord:
    setting: str
    task: int
    sample_index: int
    true_label: int
    predicted_label: int


def _evaluate_task(model: ContinualModel, data, settings, rectify: bool):
    accuracy, records, probs = {}, [], None
    use = rectify and bool(model.retrospectors)
    t = data.task
    if "TIL" in settings:
        pred, _ = til_predict(model, data.x_test, t, rectify=use)
        accuracy["TIL"] = float(np.mean(pred == data.y_test))
        records += [EvalRecord("TIL", t, i, int(y), int(p)) for i, (y, p) in enumerate(zip(data.y_test, pred))]
    if "CIL" in settings:
        pred, probs = cil_predict(model, data.x_test, rectify=use)
        accuracy["CIL"] = float(np.mean(pred == data.y_test))
        records += [EvalRecord("CIL", t, i, int(y), int(p)) for i, (y, p) in enumerate(zip(data.y_test, pred))]
    return accuracy, records, probs


def evaluate(model: ContinualModel, stream, settings=("TIL", "CIL"), rectify: bool = True,
             upto: int | None = None, workers: int = 1):
    """Test-split accuracy per learned task. Returns ``(accuracy, records, cil_probs)`` where
    ``accuracy[setting][task]`` is a float and ``cil_probs[task]`` the averaged CIL vectors.

    Tasks may be evaluated on ``workers`` threads; results are gathered in task order.
    """
    upto = model.n_tasks if upto is None else upto
    tasks = [stream[t] for t in range(1, upto + 1)]
    run = lambda data: _evaluate_task(model, data, settings, rectify)  # noqa: E731
    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, tasks))
    else:
        parts = [run(d) for d in tasks]
    accuracy = {s: {} for s in settings}
    records: list[EvalRecord] = []
    cil_probs = {}
    for data, (acc, recs, probs) in zip(tasks, parts):
        for s, v in acc.items():
            accuracy[s][data.task] = v
        records += recs
        if probs is not None:
            cil_probs[data.task] = probs
    return accuracy, records, cil_probs
