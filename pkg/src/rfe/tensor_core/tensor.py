"""Dense float64 tensors and the tape that records differentiable operations."""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("rfe_tape", default=None)


class Tensor:
    """A float64 array with an optional gradient accumulator.

    Tensors created outside an active :class:`Tape` never record history, so
    inference code can run without one.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # internal constructor that skips the defensive copy
        t = cls.__new__(cls)
        t.data = np.require(arr, dtype=np.float64, requirements="C")
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


@dataclass
class _Record:
    output: Tensor
    inputs: Sequence[Tensor]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of executed operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order, so the log is
    topologically sorted by construction.

    >>> with Tape() as tape:
    ...     loss = ops.mse_sum(model(x), y)
    >>> tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None
        self._consumed = False

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward) -> None:
        self.records.append(_Record(output, tuple(inputs), backward))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Reverse sweep from ``loss``; accumulates ``.grad`` on leaves that require it."""
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        self._consumed = True
        produced = {id(r.output) for r in self.records}
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=np.float64)
        }
        leaves: dict[int, Tensor] = {}
        if not self.records and loss.requires_grad:
            leaves[id(loss)] = loss
        for rec in reversed(self.records):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            in_grads = rec.backward(g_out)
            for inp, g in zip(rec.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def current_tape() -> Optional[Tape]:
    return _active_tape.get()


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)
