"""Binary weight files.

Layout: ``b"QACM"``, u16 version (=1), u32 header length, UTF-8 JSON header
``{"config": ..., "tensors": [{"name", "shape", "offset"}], "meta": ...}``,
then the tensors as contiguous little-endian float64. Offsets are in bytes
from the start of the data section.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from ..errors import CorruptWeights, FormatError
from .fixture import MemoryTable
from .transformer import ModelConfig, ModelWeights, expected_shapes

MAGIC = b"QACM"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def encode_model(config: ModelConfig, weights: ModelWeights, meta: dict | None = None) -> bytes:
    directory, blobs, offset = [], [], 0
    for name, arr in weights.tensors().items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {"config": config.to_dict(), "tensors": directory}
    if meta is not None:
        header["meta"] = meta
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(raw)) + raw + b"".join(blobs)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(path, config: ModelConfig, weights: ModelWeights, meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode_model(config, weights, meta))


def save_fixture(path, config: ModelConfig, weights: ModelWeights, table: MemoryTable) -> None:
    save_model(path, config, weights, meta={"memory_table": table.to_dict()})


def decode_model(buf: bytes):
    if len(buf) < _PREFIX.size:
        raise CorruptWeights("file shorter than its fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise CorruptWeights("header truncated")
    try:
        header = json.loads(buf[start:start + hlen].decode())
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid header: {exc}") from exc
    data = memoryview(buf)[start + hlen:]
    shapes = expected_shapes(config)
    tensors = {}
    end = 0
    for entry in header.get("tensors", []):
        name, shape, off = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        if name not in shapes:
            raise CorruptWeights(f"unknown tensor {name!r}")
        if shape != shapes[name]:
            raise CorruptWeights(f"{name}: shape {shape} does not match config {shapes[name]}")
        nbytes = 8 * int(np.prod(shape))
        if off < 0 or off + nbytes > len(data):
            raise CorruptWeights(f"{name}: data truncated")
        tensors[name] = np.frombuffer(data[off:off + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        end = max(end, off + nbytes)
    missing = set(shapes) - set(tensors)
    if missing:
        raise CorruptWeights(f"missing tensors: {sorted(missing)}")
    if end != len(data):
        raise CorruptWeights("trailing bytes after tensor data")
    try:
        weights = ModelWeights(config, **tensors)
    except ValueError as exc:
        raise CorruptWeights(str(exc)) from exc
    return config, weights, header.get("meta")


def load_model(path):
    config, weights, _ = decode_model(Path(path).read_bytes())
    return config, weights


def load_fixture(path):
    """Load a file written by :func:`save_fixture` as ``(config, weights, memory_table)``."""
    config, weights, meta = decode_model(Path(path).read_bytes())
    if not meta or "memory_table" not in meta:
        raise FormatError("file carries no memory table")
    return config, weights, MemoryTable.from_dict(meta["memory_table"])
