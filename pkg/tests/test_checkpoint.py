import os
import struct
import numpy as np
import pytest
from mcan.checkpoint import (
    MAGIC,
    VERSION,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from mcan.optimisation import TrainConfig
from mcan.transform import TransformParams
from mcan.utils import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
import zlib

from .utils import *


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_roundtrip(tmp_path):
    print("Testing checkpoint round trips")
    net = toy_net(seed=3, enable_multilabel=False)
    config = TrainConfig(epochs=2, checkpoint_path="somewhere.mcan")
    path = str(tmp_path / "model.mcan")
    save_checkpoint(net, config, path)
    loaded, train_config = load_checkpoint(path)
    assert loaded.config == net.config
    assert train_config == config._replace(checkpoint_path=None)
    assert list(loaded.params) == list(net.params)
    x, _ = toy_batch(4, seed=9)
    for t in (TransformParams(1, 0), TransformParams(3, 0.75)):
        assert np.array_equal(loaded.predict_proba(x, t), net.predict_proba(x, t))
    assert np.array_equal(loaded.masks(x, 2), net.masks(x, 2))
    # identical bytes for identical networks
    with open(path, "rb") as f:
        assert f.read() == checkpoint_bytes(net, config)
    assert [f for f in os.listdir(str(tmp_path)) if f.startswith(".")] == []
    _, none = parse_checkpoint(checkpoint_bytes(net))
    assert none is None
    # loaded parameters can be updated in place
    p = loaded.params["binhead.0.dense.bias"]
    before = p.values.copy()
    p.values -= 0.5
    assert np.allclose(p.values, before - 0.5)


def test_layout():
    print("Testing the checkpoint layout")
    data = checkpoint_bytes(toy_net())
    assert data[:4] == MAGIC
    assert struct.unpack_from("<I", data, 4)[0] == VERSION
    (header_len,) = struct.unpack_from("<Q", data, 8)
    assert data[16 : 16 + header_len].startswith(b"{")
    assert struct.unpack_from("<I", data, len(data) - 4)[0] == zlib.crc32(data[:-4]) & 0xFFFFFFFF


def test_corruption():
    print("Testing corrupted checkpoints")
    data = checkpoint_bytes(toy_net())
    for i in (len(data) // 2, len(data) - 10):
        corrupt = bytearray(data)
        corrupt[i] ^= 0xFF
        with pytest.raises(CheckpointChecksumError):
            parse_checkpoint(bytes(corrupt))
    crc = bytearray(data)
    crc[-1] ^= 0x01
    with pytest.raises(CheckpointChecksumError):
        parse_checkpoint(bytes(crc))
    for n in (3, 10, 100, len(data) - 1):
        with pytest.raises(CheckpointTruncatedError):
            parse_checkpoint(data[:n])
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"PNG!" + data[4:])
    with pytest.raises(CheckpointError):
        parse_checkpoint(_with_crc(data[:-4] + b"\x00" * 8))
    # a future version with a valid checksum
    future = bytearray(data[:-4])
    future[4:8] = struct.pack("<I", VERSION + 1)
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(_with_crc(bytes(future)))
    assert issubclass(CheckpointVersionError, CheckpointError)


def test_load_errors(tmp_path):
    print("Testing checkpoint files")
    path = str(tmp_path / "bad.mcan")
    with open(path, "wb") as f:
        f.write(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "missing.mcan"))
