import hashlib
import struct

import numpy as np
import pytest

from skippatch.checkpoint import Checkpoint, CheckpointError, decode, encode, load_checkpoint, save_checkpoint


def sample():
    g = np.random.default_rng(0)
    return Checkpoint({"step": 7, "note": "x", "nested": {"b": [1, 2], "a": None}},
                      {"G/w": g.normal(size=(2, 3, 4, 4)), "G/b": np.zeros(2), "scalar": np.array(1.5)})


def test_save_load_save_is_byte_identical(tmp_path):
    save_checkpoint(sample(), tmp_path / "a.spgn")
    ck = load_checkpoint(tmp_path / "a.spgn")
    save_checkpoint(ck, tmp_path / "b.spgn")
    assert (tmp_path / "a.spgn").read_bytes() == (tmp_path / "b.spgn").read_bytes()
    assert ck.meta == sample().meta
    for name, arr in sample().tensors.items():
        assert ck.tensors[name].shape == arr.shape
        np.testing.assert_array_equal(ck.tensors[name], arr)


def test_encoding_ignores_insertion_order():
    a = sample()
    b = Checkpoint(dict(reversed(list(a.meta.items()))), dict(reversed(list(a.tensors.items()))))
    assert encode(a) == encode(b)


@pytest.mark.parametrize("offset", [0, 5, 12, -9, -1])
def test_flipped_byte_fails_checksum(offset):
    data = bytearray(encode(sample()))
    data[offset] ^= 0x40
    with pytest.raises(CheckpointError, match="checksum"):
        decode(bytes(data))


def test_version_mismatch():
    data = bytearray(encode(sample()))
    data[4:8] = struct.pack("<I", 2)
    body = bytes(data[:-8])
    fixed = body + hashlib.blake2b(body, digest_size=8).digest()
    with pytest.raises(CheckpointError, match="version"):
        decode(fixed)


def test_truncated_file():
    with pytest.raises(CheckpointError):
        decode(encode(sample())[:10])


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "none.spgn")
