"""Dense tensors and the reverse-mode tape.

A Tensor wraps a contiguous row-major float array. Ops (see ops.py) record
onto the currently active Tape, which is rebuilt for every forward pass:
entries are appended in execution order, so the list is topologically sorted
by construction and backward() simply replays it in reverse. A tensor is
treated as immutable while a tape that references it is alive; only its
`grad` slot is written, by backward(). The optimizer swaps parameter data
between tapes, never during one.

Tapes are tracked per thread. With no tape active (the default, and the
benchmark forward-only mode) ops compute values without recording anything.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


def as_contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray turns 0-d into 1-d; 0-d is already contiguous.
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


class ShapeError(ValueError):
    """Raised when operand shapes or contraction labels are inconsistent."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = as_contiguous(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# Backward rule: gradient of the output -> per-input gradients (None where
# the input does not need one).
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class TapeEntry:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardRule):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardRule) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves[id(t)] = t
        self._produced.add(id(output))
        self.entries.append(TapeEntry(inputs, output, backward))

    def watch(self, t: Tensor) -> None:
        """Register a leaf so it receives a (possibly zero) grad even if unused."""
        if t.requires_grad and id(t) not in self._produced:
            self._leaves[id(t)] = t

    def leaves(self) -> Iterator[Tensor]:
        return iter(self._leaves.values())


_LOCAL = threading.local()


def _stack() -> list[Tape]:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def record_tape() -> Iterator[Tape]:
    tape = Tape()
    _stack().append(tape)
    try:
        yield tape
    finally:
        _stack().pop()


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every watched leaf.

    The loss must be scalar and its full ancestry must be on `tape`. Leaves
    that do not reach the loss get an all-zero grad. Fan-out accumulates
    additively: a tensor consumed by several entries receives the sum of the
    per-use gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        leaf.grad = np.zeros_like(leaf.data) if g is None else as_contiguous(g)
