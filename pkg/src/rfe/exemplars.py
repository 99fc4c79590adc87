"""Exemplar storage behind the P (previous-task subset) and B (reservoir) strategies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

SUBSET_PREV_TASK = "subset_prev_task"
RESERVOIR_ALL_TASKS = "reservoir_all_tasks"


@dataclass
class Exemplar:
    x: np.ndarray
    task: int
    label: int
    feature: Optional[np.ndarray] = None  # representation under the extractor of ``task``


class ExemplarStore:
    def __init__(self, capacity: int, policy: str = RESERVOIR_ALL_TASKS):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        if policy not in (SUBSET_PREV_TASK, RESERVOIR_ALL_TASKS):
            raise ValueError(f"unknown store policy {policy!r}")
        self.capacity = capacity
        self.policy = policy
        self.entries: list[Exemplar] = []
        self.seen = 0

    def __len__(self) -> int:
        return len(self.entries)

    def tasks(self) -> np.ndarray:
        return np.array([e.task for e in self.entries], dtype=np.int64)

    def arrays(self):
        """Stacked ``(x, task, label, feature)``; ``feature`` is None unless every entry has one."""
        if not self.entries:
            return None
        x = np.stack([e.x for e in self.entries])
        task = self.tasks()
        label = np.array([e.label for e in self.entries], dtype=np.int64)
        feats = None
        if all(e.feature is not None for e in self.entries):
            feats = np.stack([e.feature for e in self.entries])
        return x, task, label, feats

    def replace_with_subset(self, items: list[Exemplar], rng: np.random.Generator) -> None:
        """Keep a uniform random subset of one task's samples, dropping everything older."""
        keep = min(self.capacity, len(items))
        idx = np.sort(rng.choice(len(items), size=keep, replace=False)) if keep else []
        self.entries = [items[i] for i in idx]
        self.seen = len(items)


def reservoir_insert(store: ExemplarStore, item: Exemplar, n: int, rng: np.random.Generator) -> ExemplarStore:
    """Algorithm R step for the ``n``-th item (1-based) of the stream."""
    store.seen = n
    if store.capacity == 0:
        return store
    if len(store.entries) < store.capacity:
        store.entries.append(item)
        return store
    j = int(rng.integers(n))
    if j < store.capacity:
        store.entries[j] = item
    return store
