"""Accuracy and feature-RMSE matrices, PCA of latent features, CSV exports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DegenerateSpectrumError, MissingEntryError, MissingStateError
from .inference import rectify_chain
from .tensor_core import Tensor

SETTINGS = ("TIL", "CIL")
REPRESENTATIONS = ("drifted", "rectified")


def fmt(value: float) -> str:
    """17 significant digits: enough to round-trip any float64."""
    return f"{float(value):.17g}"


@dataclass
class _Triangular:
    n_tasks: int
    entries: dict = field(default_factory=dict)

    def _check_index(self, i: int, j: int) -> None:
        if not (1 <= j <= i <= self.n_tasks):
            raise IndexError(f"entry ({i}, {j}) outside the lower triangle of a {self.n_tasks}-task matrix")

    def __getitem__(self, key):
        i, j = key
        self._check_index(i, j)
        if key not in self.entries:
            raise MissingEntryError(f"entry ({i}, {j}) has not been recorded")
        return self.entries[key]

    def __contains__(self, key) -> bool:
        return key in self.entries

    def row(self, i: int) -> np.ndarray:
        missing = [j for j in range(1, i + 1) if (i, j) not in self.entries]
        if missing:
            raise MissingEntryError(f"row {i} lacks entries for tasks {missing}")
        return np.array([self.entries[i, j] for j in range(1, i + 1)])

    def rows(self) -> list[int]:
        return sorted({i for i, _ in self.entries})

    def to_dense(self) -> np.ndarray:
        """Square array with NaN outside the recorded entries."""
        out = np.full((self.n_tasks, self.n_tasks), np.nan)
        for (i, j), v in self.entries.items():
            out[i - 1, j - 1] = v
        return out


@dataclass
class AccuracyMatrix(_Triangular):
    """``A[i, j]``: test accuracy on task j after training through task i."""

    setting: str = "TIL"

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")

    def __setitem__(self, key, value: float) -> None:
        i, j = key
        self._check_index(i, j)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.entries[i, j] = float(value)


@dataclass
class RmseMatrix(_Triangular):
    """``R[i, j]``: RMSE of a representation of task-j test data after task i against f_j."""

    representation: str = "drifted"

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")

    def __setitem__(self, key, value: float) -> None:
        i, j = key
        self._check_index(i, j)
        if not value >= 0.0:
            raise ValueError(f"rmse {value} must be non-negative")
        self.entries[i, j] = float(value)


def average_accuracy(matrix: AccuracyMatrix, after_task: int) -> float:
    return float(np.mean(matrix.row(after_task)))


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    """Pooled over samples and coordinates."""
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def representation(state, x: np.ndarray, task: int, use_rectification: bool) -> np.ndarray:
    if use_rectification:
        return rectify_chain(state, x, task).features[-1]
    return state.extract(Tensor(x)).data


def feature_rmse(states: Mapping[int, object], stream, use_rectification: bool,
                 upto: int | None = None) -> RmseMatrix:
    """Fill ``R[i, j]`` for every i ≤ ``upto`` from per-task model snapshots.

    ``states[i]`` is the model as it stood after training task i.
    """
    n = stream.n_tasks if upto is None else upto
    missing = [t for t in range(1, n + 1) if t not in states]
    if missing:
        raise MissingStateError(f"no model snapshot for tasks {missing}")
    out = RmseMatrix(n, representation="rectified" if use_rectification else "drifted")
    originals = {j: states[j].extract(Tensor(stream[j].x_test)).data for j in range(1, n + 1)}
    for i in range(1, n + 1):
        for j in range(1, i + 1):
            x = stream[j].x_test
            rep = originals[j] if i == j else representation(states[i], x, j, use_rectification)
            out[i, j] = rmse(rep, originals[j])
    return out


# ---------------------------------------------------------------- PCA

@dataclass
class PCAResult:
    sources: list          # source tag per projected row
    sample_index: np.ndarray  # index of the row within its source group
    coords: np.ndarray     # (n, k)
    components: np.ndarray  # (k, dim), unit rows
    eigenvalues: np.ndarray
    explained_ratio: np.ndarray
    mean: np.ndarray
    iterations: list


def power_iteration(cov: np.ndarray, k: int, rng: np.random.Generator, tol: float = 1e-10,
                    max_iter: int = 10_000):
    """Top-``k`` eigenpairs of a symmetric PSD matrix by deflated power iteration.

    A vector is accepted once the relative eigenvalue change and the relative
    residual ``|C v - lambda v| / lambda`` both fall below ``tol``; the
    eigenvalue alone converges twice as fast as the vector does.
    """
    c = np.array(cov, dtype=np.float64)
    dim = c.shape[0]
    trace = float(np.trace(c))
    vals, vecs, iters = [], [], []
    for _ in range(k):
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        lam = float(v @ c @ v)
        it = 0
        for it in range(1, max_iter + 1):
            w = c @ v
            for u in vecs:  # keep the iterate clear of earlier components
                w -= (w @ u) * u
            norm = np.linalg.norm(w)
            if norm <= 1e-300:
                lam = 0.0
                break
            v = w / norm
            cv = c @ v
            for u in vecs:
                cv -= (cv @ u) * u
            new = float(v @ cv)
            scale = max(abs(new), 1e-300)
            done = abs(new - lam) < tol * scale and np.linalg.norm(cv - new * v) < tol * scale
            lam = new
            if done:
                break
        if lam <= 1e-12 * max(trace, 1e-300):
            raise DegenerateSpectrumError(f"covariance rank is below k={k}")
        # fix the sign so the largest-magnitude coordinate is positive
        v = v * np.sign(v[np.argmax(np.abs(v))])
        vals.append(lam)
        vecs.append(v)
        iters.append(it)
        c = c - lam * np.outer(v, v)
    return np.array(vals), np.array(vecs), iters


def pca_export(groups: Mapping[str, np.ndarray], k: int = 2, seed: int = 0) -> PCAResult:
    """Fit PCA on the union of all groups and project every group into that basis."""
    sources, index, rows = [], [], []
    for name, arr in groups.items():
        arr = np.asarray(arr, dtype=np.float64)
        arr = arr.reshape(len(arr), -1)
        sources += [name] * len(arr)
        index.append(np.arange(len(arr)))
        rows.append(arr)
    if not rows:
        raise DegenerateSpectrumError("no feature vectors to project")
    x = np.concatenate(rows)
    if len(x) < k + 1:
        raise DegenerateSpectrumError(f"need at least {k + 1} vectors, got {len(x)}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (len(x) - 1)
    vals, vecs, iters = power_iteration(cov, k, np.random.default_rng(seed))
    return PCAResult(sources, np.concatenate(index), centered @ vecs.T, vecs, vals,
                     vals / np.trace(cov), mean, iters)


# ---------------------------------------------------------------- CSV

def write_accuracy_csv(path, matrices) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trained_task", "eval_task", "setting", "accuracy"])
        for m in matrices:
            for (i, j) in sorted(m.entries):
                w.writerow([i, j, m.setting, fmt(m.entries[i, j])])


def write_rmse_csv(path, matrices) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trained_task", "eval_task", "representation", "rmse"])
        for m in matrices:
            for (i, j) in sorted(m.entries):
                w.writerow([i, j, m.representation, fmt(m.entries[i, j])])


def write_pca_csv(path, result: PCAResult) -> None:
    if result.coords.shape[1] < 2:
        raise ValueError("the PCA export needs two components")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "sample_index", "pc1", "pc2"])
        for src, idx, row in zip(result.sources, result.sample_index, result.coords):
            w.writerow([src, int(idx), fmt(row[0]), fmt(row[1])])


def read_accuracy_csv(path) -> list[AccuracyMatrix]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    n = max((int(r["trained_task"]) for r in rows), default=0)
    out = {}
    for r in rows:
        m = out.setdefault(r["setting"], AccuracyMatrix(n, setting=r["setting"]))
        m[int(r["trained_task"]), int(r["eval_task"])] = float(r["accuracy"])
    return list(out.values())
