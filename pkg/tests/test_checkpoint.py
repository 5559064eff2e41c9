import struct

import numpy as np
import pytest

from sitsforecast import checkpoint as ck
from sitsforecast.core.params import FROZEN, SEMANTIC_TEMPORAL, STRUCTURAL, ParamStore
from sitsforecast.errors import ValidationError


def small_store():
    store = ParamStore()
    store.add("a", np.arange(6, dtype=float).reshape(2, 3), STRUCTURAL)
    store.add("b", np.array(2.5), SEMANTIC_TEMPORAL)
    store.add("c", np.zeros((1, 2, 1)), FROZEN)
    store.meta["completed_stage"] = 2
    store.meta["lr"] = 0.001
    return store


def test_known_layout():
    store = ParamStore()
    store.add("w", np.array([1.0, -2.0]), STRUCTURAL)
    expected = (b"TAMK" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"w"
                + struct.pack("<BI", 1, 1) + struct.pack("<I", 2) + struct.pack("<2d", 1.0, -2.0))
    assert ck.encode_checkpoint(store) == expected


def test_roundtrip_values_partitions_meta(tmp_path):
    store = small_store()
    ck.save_checkpoint(store, tmp_path / "m.ckpt")
    back = ck.load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == list(store)
    for n in store:
        assert np.array_equal(back[n], store[n]) and back[n].shape == store[n].shape
        assert back.partition_of(n) == store.partition_of(n)
    assert back.meta == {"completed_stage": 2, "lr": 0.001}
    assert ck.encode_checkpoint(back) == ck.encode_checkpoint(store)


def test_partition_bytes_diff():
    store = small_store()
    before = ck.partition_bytes(ck.encode_checkpoint(store), STRUCTURAL)
    store.set_value("b", np.array(3.0))
    after = ck.encode_checkpoint(store)
    assert ck.partition_bytes(after, STRUCTURAL) == before
    assert ck.partition_bytes(after, SEMANTIC_TEMPORAL) != ck.partition_bytes(
        ck.encode_checkpoint(small_store()), SEMANTIC_TEMPORAL)
    assert set(ck.partition_bytes(after, FROZEN)) == {"c"}


def test_corrupt_inputs(tmp_path):
    data = ck.encode_checkpoint(small_store())
    with pytest.raises(ValidationError):
        ck.decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(ValidationError):
        ck.decode_checkpoint(data[:4] + struct.pack("<I", 9) + data[8:])
    with pytest.raises(ValidationError):
        ck.decode_checkpoint(data[:-3])
    bad_tag = bytearray(data)
    bad_tag[8 + 4 + 1] = 9  # tag byte of the first record "a"
    with pytest.raises(ValidationError):
        ck.decode_checkpoint(bytes(bad_tag))
    with pytest.raises(FileNotFoundError):
        ck.load_checkpoint(tmp_path / "missing.ckpt")
