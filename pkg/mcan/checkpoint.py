"""
    This script contains the checkpoint format.

    Layout (little-endian):
        b"MCAN"                 magic
        u32                     format version
        u64                     length of the JSON header in bytes
        JSON header             {"net_config", "train_config", "parameters": [{"name", "shape", "offset"}]}
        float64 arrays          the parameters in manifest order (offsets relative to the first array)
        u32                     CRC32 of all preceding bytes
"""

import json
import logging
import os
import struct
import tempfile
import zlib
from typing import Any, Dict, Optional, Tuple
import numpy as np
from mcan.autodiff import Tensor
from mcan.network import MultiAttrNet, NetConfig, init_params
from mcan.utils import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)

logger = logging.getLogger(__name__)

MAGIC = b"MCAN"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_CRC = struct.Struct("<I")
_MIN_SIZE = _PREFIX.size + _CRC.size


def checkpoint_bytes(net: MultiAttrNet, config: Optional[Any] = None) -> bytes:
    """Serialise a network (and optionally its training config)

    Args:
        net (MultiAttrNet): the network
        config (Optional[TrainConfig], optional): the training config (the checkpoint path is not stored). Defaults to None.

    Returns:
        bytes: the checkpoint
    """
    manifest = []
    arrays = []
    offset = 0
    for name, p in net.params.items():
        data = np.ascontiguousarray(p.values, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        arrays.append(data)
        offset += len(data)
    header = {
        "net_config": net.config._asdict(),
        "train_config": None if config is None else config._replace(checkpoint_path=None).to_dict(),
        "parameters": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join([_PREFIX.pack(MAGIC, VERSION, len(header_bytes)), header_bytes] + arrays)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(net: MultiAttrNet, config: Optional[Any], path: str):
    """
        Write the checkpoint atomically (to a temporary file that replaces `path`)
    """
    data = checkpoint_bytes(net, config)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".mcan-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    logger.info("Saved checkpoint to %s (%d bytes)", path, len(data))


def _crc_ok(data: bytes) -> bool:
    return _CRC.unpack_from(data, len(data) - _CRC.size)[0] == zlib.crc32(data[: -_CRC.size]) & 0xFFFFFFFF


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> Tuple[MultiAttrNet, Optional[Any]]:
    """Deserialise a checkpoint

    Args:
        data (bytes): the checkpoint
        source (str, optional): name used in error messages. Defaults to "<bytes>".

    Raises:
        CheckpointTruncatedError: if the data is shorter than declared
        CheckpointChecksumError: if the CRC32 does not match
        CheckpointVersionError: if the format version is unsupported
        CheckpointError: for other malformed checkpoints

    Returns:
        Tuple[MultiAttrNet, Optional[TrainConfig]]: the network and the training config
    """
    from mcan.optimisation import TrainConfig

    if len(data) < _MIN_SIZE:
        raise CheckpointTruncatedError(f"'{source}' is truncated ({len(data)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"'{source}' is not a checkpoint (magic {magic!r})")
    start = _PREFIX.size + header_len
    if start + _CRC.size > len(data):
        raise CheckpointTruncatedError(f"'{source}' is shorter than its {header_len} byte header")
    try:
        header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
        manifest = header["parameters"]
        shapes = [tuple(int(s) for s in e["shape"]) for e in manifest]
    except (ValueError, KeyError, TypeError):
        if not _crc_ok(data):
            raise CheckpointChecksumError(f"'{source}' failed the checksum")
        raise CheckpointError(f"'{source}' has a malformed header")
    size = sum(8 * int(np.prod(s)) for s in shapes)
    expected = start + size + _CRC.size
    if len(data) < expected:
        raise CheckpointTruncatedError(f"'{source}' has {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise CheckpointError(f"'{source}' has {len(data) - expected} trailing bytes")
    if not _crc_ok(data):
        raise CheckpointChecksumError(f"'{source}' failed the checksum")
    if version != VERSION:
        raise CheckpointVersionError(f"'{source}' has format version {version}, expected {VERSION}")
    try:
        config = NetConfig(**header["net_config"])
        train_config = header.get("train_config")
        if train_config is not None:
            train_config = TrainConfig.from_dict(train_config)
    except TypeError as e:
        raise CheckpointError(f"'{source}' has an invalid config: {e}")
    reference = init_params(config)
    params: Dict[str, Tensor] = {}
    for entry, shape in zip(manifest, shapes):
        name = entry["name"]
        if name not in reference.params or reference.params[name].shape != shape:
            raise CheckpointError(f"'{source}' has an unexpected parameter '{name}' {shape}")
        values = np.frombuffer(
            data, dtype="<f8", count=int(np.prod(shape)), offset=start + int(entry["offset"])
        )
        params[name] = Tensor(values.reshape(shape), requires_grad=True)
    missing = set(reference.params) - set(params)
    if missing:
        raise CheckpointError(f"'{source}' is missing parameters {sorted(missing)}")
    params = {name: params[name] for name in reference.params}
    return MultiAttrNet(config, params), train_config


def load_checkpoint(path: str) -> Tuple[MultiAttrNet, Optional[Any]]:
    """
        Read a checkpoint written by `save_checkpoint`, see `parse_checkpoint`
    """
    with open(path, "rb") as f:
        data = f.read()
    return parse_checkpoint(data, path)
