"""Binary checkpoint container.

Layout (little-endian throughout)::

    b"TAMK"  u32 version
    repeated: u32 name_len, name (UTF-8), u8 partition tag, u32 rank,
              u32 dims[rank], f64 payload[prod(dims)]

Store metadata travels as rank-0 records named ``__meta__.<key>`` tagged frozen.
Records are written in store order, so equal stores give equal bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core.params import FROZEN, PRETRAIN, SEMANTIC_TEMPORAL, STRUCTURAL, ParamStore
from .errors import ValidationError

MAGIC = b"TAMK"
VERSION = 1
META_PREFIX = "__meta__."
TAGS = {FROZEN: 0, STRUCTURAL: 1, SEMANTIC_TEMPORAL: 2, PRETRAIN: 3}
PARTITION_OF_TAG = {v: k for k, v in TAGS.items()}


def _record(name: str, tag: int, value: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    # ascontiguousarray would promote 0-d arrays to 1-d; tobytes is C order anyway
    value = np.asarray(value, dtype="<f8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", tag, value.ndim)
    dims = struct.pack(f"<{value.ndim}I", *value.shape)
    return head + dims + value.tobytes()


def encode_checkpoint(store: ParamStore) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, entry in store.items():
        parts.append(_record(name, TAGS[entry.partition], entry.value))
    for key in sorted(store.meta):
        parts.append(_record(META_PREFIX + key, TAGS[FROZEN], np.asarray(float(store.meta[key]))))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValidationError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def iter_records(data: bytes):
    """Yield ``(name, tag, value, raw_record_bytes)`` for every record."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ValidationError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    while not r.done:
        begin = r.pos
        (n,) = r.unpack("<I")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise ValidationError("checkpoint record name is not UTF-8") from None
        tag, rank = r.unpack("<BI")
        if tag not in PARTITION_OF_TAG:
            raise ValidationError(f"{name}: unknown partition tag {tag}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        value = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        yield name, tag, value, data[begin:r.pos]


def decode_checkpoint(data: bytes) -> ParamStore:
    store = ParamStore()
    for name, tag, value, _ in iter_records(data):
        if name.startswith(META_PREFIX):
            v = float(value.reshape(()))
            store.meta[name[len(META_PREFIX):]] = int(v) if v.is_integer() else v
        else:
            store.add(name, value, PARTITION_OF_TAG[tag])
    return store


def save_checkpoint(store: ParamStore, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(store))


def load_checkpoint(path: str | Path) -> ParamStore:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())


def partition_bytes(data: bytes, partition: str) -> dict[str, bytes]:
    """Raw record bytes of every parameter tagged ``partition``; used to diff checkpoints."""
    tag = TAGS[partition]
    return {name: raw for name, t, _, raw in iter_records(data)
            if t == tag and not name.startswith(META_PREFIX)}
