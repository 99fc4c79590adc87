"""Task streams: synthetic Gaussian-blob streams and the RFED1 dataset container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ParseError

MAGIC = b"RFED1"
_U64 = struct.Struct("<Q")
VAL_PERIOD = 10  # one sample in ten goes to validation


@dataclass(frozen=True)
class TaskDataset:
    task: int
    classes: tuple
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def local(self, y: np.ndarray) -> np.ndarray:
        """Map global labels to head-local indices."""
        lookup = {c: i for i, c in enumerate(self.classes)}
        return np.array([lookup[int(v)] for v in y], dtype=np.intp)


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple
    input_shape: tuple

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def __getitem__(self, task: int) -> TaskDataset:
        return self.tasks[task - 1]

    def __iter__(self):
        return iter(self.tasks)

    @property
    def n_classes(self) -> int:
        return sum(t.n_classes for t in self.tasks)

    def task_classes(self) -> list[tuple]:
        return [t.classes for t in self.tasks]

    def standardize(self) -> "TaskStream":
        """Per-feature standardization with statistics from task-1 training data only."""
        ref = self.tasks[0].x_train
        mu = ref.mean(axis=0)
        sd = ref.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        tasks = tuple(
            replace(t, x_train=(t.x_train - mu) / sd, x_val=(t.x_val - mu) / sd, x_test=(t.x_test - mu) / sd)
            for t in self.tasks
        )
        return TaskStream(tasks, self.input_shape)


def _split_validation(x: np.ndarray, y: np.ndarray, residue: int):
    val = np.arange(len(y)) % VAL_PERIOD == residue
    return x[~val], y[~val], x[val], y[val]


def _merge_validation(x_tr, y_tr, x_val, y_val, residue: int):
    n = len(y_tr) + len(y_val)
    val = np.arange(n) % VAL_PERIOD == residue
    x = np.empty((n, *x_tr.shape[1:]))
    y = np.empty(n, dtype=np.int64)
    x[~val], y[~val] = x_tr, y_tr
    x[val], y[val] = x_val, y_val
    return x, y


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_blob_stream(n_tasks: int, classes_per_task: int, dim: int, samples_per_class: int,
                     separation: float, drift: float, seed: int, noise: float = 1.0,
                     test_per_class: Optional[int] = None) -> TaskStream:
    """Class-incremental stream of isotropic Gaussian blobs.

    Class means of task 1 lie on a sphere of radius ``separation``. Each
    later task starts from the previous task's means and rotates every mean
    by the angle ``drift * pi / 2`` toward a fresh random direction, so
    ``drift=0`` reuses the same input regions and ``drift=1`` moves to
    orthogonal ones. ``samples_per_class`` samples per class form the
    training pool (one in ten held out for validation); the test split has
    ``test_per_class`` samples per class (default: a quarter of the pool).
    """
    if min(n_tasks, classes_per_task, dim, samples_per_class) <= 0:
        raise ConfigError("blob stream counts must all be positive")
    if separation <= 0 or noise <= 0:
        raise ConfigError("separation and noise must be positive")
    if samples_per_class < VAL_PERIOD:
        raise ConfigError(f"samples_per_class must be at least {VAL_PERIOD}")
    n_test = max(1, samples_per_class // 4) if test_per_class is None else test_per_class
    rng = np.random.default_rng(seed)
    residue = seed % VAL_PERIOD
    theta = drift * np.pi / 2
    means = _unit(rng.normal(size=(classes_per_task, dim)))
    tasks = []
    for t in range(1, n_tasks + 1):
        if t > 1:
            fresh = rng.normal(size=means.shape)
            fresh -= (fresh * means).sum(axis=1, keepdims=True) * means
            means = _unit(np.cos(theta) * means + np.sin(theta) * _unit(fresh))
        classes = tuple(range((t - 1) * classes_per_task, t * classes_per_task))
        pool_x, pool_y, test_x, test_y = [], [], [], []
        for k, c in enumerate(classes):
            mu = separation * means[k]
            pool_x.append(mu + noise * rng.normal(size=(samples_per_class, dim)))
            pool_y.append(np.full(samples_per_class, c))
            test_x.append(mu + noise * rng.normal(size=(n_test, dim)))
            test_y.append(np.full(n_test, c))
        px, py = np.concatenate(pool_x), np.concatenate(pool_y)
        perm = rng.permutation(len(py))
        px, py = px[perm], py[perm]
        x_tr, y_tr, x_val, y_val = _split_validation(px, py, residue)
        tasks.append(TaskDataset(t, classes, x_tr, y_tr, x_val, y_val,
                                 np.concatenate(test_x), np.concatenate(test_y)))
    return TaskStream(tuple(tasks), (dim,))


# ---------------------------------------------------------------- RFED1 container

def write_labeled_file(path, stream: TaskStream, seed: int = 0) -> None:
    """Serialize a stream; train and validation rows are re-interleaved into
    one training pool so that :func:`split_labeled_file` with the same seed
    recovers the original split."""
    residue = seed % VAL_PERIOD
    xs, ys, flags = [], [], []
    for t in stream:
        px, py = _merge_validation(t.x_train, t.y_train, t.x_val, t.y_val, residue)
        xs += [px, t.x_test]
        ys += [py, t.y_test]
        flags += [np.zeros(len(py), np.uint8), np.ones(len(t.y_test), np.uint8)]
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    flag = np.concatenate(flags)
    shape = stream.input_shape
    header = [MAGIC, _U64.pack(len(y)), _U64.pack(len(shape))]
    header += [_U64.pack(d) for d in shape]
    header.append(_U64.pack(stream.n_classes))
    rec = np.dtype([("label", "<u8"), ("split", "u1"), ("x", "<f8", (int(np.prod(shape)),))])
    body = np.empty(len(y), dtype=rec)
    body["label"] = y
    body["split"] = flag
    body["x"] = x.reshape(len(y), -1)
    Path(path).write_bytes(b"".join(header) + body.tobytes())


def read_labeled_file(path):
    """Returns ``(x, labels, split_flags, input_shape, n_classes)``."""
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise ParseError("missing RFED1 magic", 0)
    pos = 5

    def u64():
        nonlocal pos
        if pos + 8 > len(buf):
            raise ParseError("truncated header", pos)
        (v,) = _U64.unpack_from(buf, pos)
        pos += 8
        return v

    n = u64()
    rank = u64()
    if rank == 0 or rank > 8:
        raise ParseError(f"implausible input rank {rank}", pos - 8)
    shape = tuple(u64() for _ in range(rank))
    n_classes = u64()
    width = int(np.prod(shape))
    rec = np.dtype([("label", "<u8"), ("split", "u1"), ("x", "<f8", (width,))])
    need = n * rec.itemsize
    if len(buf) - pos < need:
        complete = (len(buf) - pos) // rec.itemsize
        raise ParseError(f"truncated sample {complete}", pos + complete * rec.itemsize)
    if len(buf) - pos > need:
        raise ParseError("trailing bytes after last sample", pos + need)
    body = np.frombuffer(buf, dtype=rec, count=n, offset=pos)
    labels = body["label"].astype(np.int64)
    split = body["split"]
    bad = np.flatnonzero(split > 1)
    if bad.size:
        raise ParseError(f"invalid split flag {split[bad[0]]}", pos + int(bad[0]) * rec.itemsize + 8)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise ParseError(f"label {labels[bad[0]]} outside {n_classes} classes", pos + int(bad[0]) * rec.itemsize)
    x = body["x"].astype(np.float64).reshape(n, *shape)
    return x, labels, split, shape, int(n_classes)


def split_labeled_file(path, n_tasks: int, seed: int = 0) -> TaskStream:
    """Partition a labeled file into ``n_tasks`` tasks owning contiguous blocks
    of sorted class ids. ``seed`` picks which residue of the training pool
    (index mod 10) becomes the validation split."""
    x, y, split, shape, n_classes = read_labeled_file(path)
    present = np.unique(y)
    if n_tasks <= 0 or len(present) % n_tasks:
        raise ConfigError(f"{len(present)} classes cannot be split evenly into {n_tasks} tasks")
    per = len(present) // n_tasks
    residue = seed % VAL_PERIOD
    tasks = []
    for t in range(1, n_tasks + 1):
        owned = tuple(int(c) for c in present[(t - 1) * per: t * per])
        sel = np.isin(y, owned)
        tr = sel & (split == 0)
        te = sel & (split == 1)
        x_tr, y_tr, x_val, y_val = _split_validation(x[tr], y[tr], residue)
        tasks.append(TaskDataset(t, owned, x_tr, y_tr, x_val, y_val, x[te], y[te]))
    return TaskStream(tuple(tasks), tuple(shape))
