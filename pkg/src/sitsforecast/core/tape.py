"""Replayable backward tape.

Ops append a :class:`Record` holding a backward closure whenever a tape is
active and at least one input requires a gradient. ``Tape.backward`` replays
the records in reverse and delivers each input's gradient exactly once.
"""

from __future__ import annotations

import contextvars
import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "sitsforecast_tape", default=None
)

# Test hook: op names whose backward output is deliberately scaled. Used to
# prove that the gradient checker detects a broken kernel.
CORRUPT_OPS: set[str] = {
    s for s in os.environ.get("SITSFORECAST_CORRUPT_BACKWARD", "").split(",") if s
}
_CORRUPT_FACTOR = 1.01


class Var:
    """A float64 array node. ``sink`` is the gradient buffer of a parameter, if any."""

    __slots__ = ("value", "requires_grad", "grad", "sink", "name")

    def __init__(self, value, requires_grad: bool = False, sink=None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.sink = sink
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Record:
    op: str
    inputs: tuple[Var, ...]
    output: Var
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    def __init__(self) -> None:
        self.records: list[Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def backward(self, loss: Var, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.value.size != 1:
                raise ValueError("backward() on a non-scalar needs an explicit seed gradient")
            grad = np.ones_like(loss.value)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
        leaves: dict[int, Var] = {id(loss): loss}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            leaves.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            corrupt = rec.op in CORRUPT_OPS
            for var, gi in zip(rec.inputs, in_grads):
                if gi is None or not var.requires_grad:
                    continue
                if corrupt:
                    gi = gi * _CORRUPT_FACTOR
                key = id(var)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    leaves[key] = var
        for key, g in grads.items():
            var = leaves[key]
            var.grad = g if var.grad is None else var.grad + g
            if var.sink is not None:
                var.sink += g


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def record(op: str, inputs: Sequence[Var], value: np.ndarray, backward) -> Var:
    tape = _ACTIVE.get()
    needs = tape is not None and any(v.requires_grad for v in inputs)
    out = Var(value, requires_grad=needs)
    if needs:
        tape.records.append(Record(op, tuple(inputs), out, backward))
    return out
