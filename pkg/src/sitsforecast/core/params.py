"""Named parameter collection partitioned by training role."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from ..errors import ConfigurationError, DimensionError
from .tape import Var

FROZEN = "frozen"
STRUCTURAL = "structural"
SEMANTIC_TEMPORAL = "semantic_temporal"
# U-Net weights while they are being pretrained; retagged frozen afterwards.
PRETRAIN = "pretrain"
PARTITIONS = (FROZEN, STRUCTURAL, SEMANTIC_TEMPORAL, PRETRAIN)


@dataclass
class ParamEntry:
    value: np.ndarray
    partition: str
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParamStore:
    """Ordered map from dotted names to parameters.

    Trainability is a per-partition flag; the ``frozen`` partition can never
    be made trainable. ``meta`` carries small integer bookkeeping (such as
    the last completed training stage) through checkpoints.
    """

    def __init__(self) -> None:
        self._entries: dict[str, ParamEntry] = {}
        self._trainable: set[str] = set()
        self._force_grad: set[str] = set()
        self.meta: dict[str, float] = {}

    def add(self, name: str, value, partition: str) -> np.ndarray:
        if partition not in PARTITIONS:
            raise ConfigurationError(f"unknown partition {partition!r}")
        if name in self._entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self._entries[name] = ParamEntry(value, partition)
        return self._entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def items(self) -> Iterable[tuple[str, ParamEntry]]:
        return self._entries.items()

    def names(self, partition: str | None = None, prefix: str = "") -> list[str]:
        return [
            n for n, e in self._entries.items()
            if (partition is None or e.partition == partition) and n.startswith(prefix)
        ]

    def partition_of(self, name: str) -> str:
        return self._entries[name].partition

    def set_value(self, name: str, value) -> None:
        entry = self._entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != entry.value.shape:
            raise DimensionError(f"{name}: shape {value.shape} != {entry.value.shape}")
        entry.value[...] = value

    def retag(self, prefix: str, partition: str) -> None:
        if partition not in PARTITIONS:
            raise ConfigurationError(f"unknown partition {partition!r}")
        for name in self.names(prefix=prefix):
            self._entries[name].partition = partition

    # -- trainability -------------------------------------------------------

    def set_trainable(self, *partitions: str) -> None:
        for p in partitions:
            if p == FROZEN:
                raise ConfigurationError("the frozen partition cannot be trained")
            if p not in PARTITIONS:
                raise ConfigurationError(f"unknown partition {p!r}")
        self._trainable = set(partitions)

    @property
    def trainable_partitions(self) -> frozenset[str]:
        return frozenset(self._trainable)

    def is_trainable(self, name: str) -> bool:
        return self._entries[name].partition in self._trainable

    def force_grad(self, names: Iterable[str]) -> None:
        """Request gradients for ``names`` regardless of partition (used by the checker)."""
        self._force_grad = set(names)

    def var(self, name: str) -> Var:
        entry = self._entries[name]
        rg = entry.partition in self._trainable or name in self._force_grad
        return Var(entry.value, requires_grad=rg, sink=entry.grad if rg else None, name=name)

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.grad[...] = 0.0

    def snapshot(self, partition: str | None = None) -> dict[str, np.ndarray]:
        return {n: self._entries[n].value.copy() for n in self.names(partition)}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n, e in self._entries.items():
            out.add(n, e.value, e.partition)
        out.meta = dict(self.meta)
        return out
