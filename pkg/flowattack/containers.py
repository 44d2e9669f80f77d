"""Binary containers: tensor files ("NFTD") and model checkpoints ("NFCK", "CLCK").

Tensor file layout (all integers little-endian)::

    magic "NFTD" | version u16 | dtype u8 (0 = f32) | ndim u8 | ndim x u32 extents | payload

Checkpoint layout::

    magic | version u16 | manifest length u32 | manifest (UTF-8 JSON, sorted keys) | payload

The checkpoint payload is the concatenation of the f32 arrays listed under the manifest's
``params`` entry, in that order. Loaders reject short and trailing bytes.
"""
from __future__ import annotations

import json
import logging
import struct
from collections.abc import Iterable
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"NFTD"
FLOW_MAGIC = b"NFCK"
CLASSIFIER_MAGIC = b"CLCK"
VERSION = 1

_DTYPES = {0: np.dtype("<f4")}
_TENSOR_HEADER = struct.Struct("<4sHBB")
_CKPT_HEADER = struct.Struct("<4sHI")


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise FormatError("too many dimensions for a tensor file", 9)
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, VERSION, 0, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + extents + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _TENSOR_HEADER.size:
        raise FormatError("truncated tensor header", len(buf))
    magic, version, code, ndim = _TENSOR_HEADER.unpack_from(buf, 0)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TENSOR_MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported tensor file version {version}", 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 6)
    offset = _TENSOR_HEADER.size
    if len(buf) < offset + 4 * ndim:
        raise FormatError("truncated shape", len(buf))
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    available = len(buf) - offset
    if available < expected:
        raise FormatError(f"payload short by {expected - available} bytes", len(buf))
    if available > expected:
        raise FormatError(f"{available - expected} trailing bytes", offset + expected)
    return np.frombuffer(buf, dtype=dtype, count=expected // dtype.itemsize, offset=offset) \
        .reshape(shape).astype(np.float32)


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))
    logger.debug("wrote tensor %s with shape %s", path, np.shape(array))


def read_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def encode_checkpoint(magic: bytes, manifest: dict[str, Any],
                      arrays: Iterable[tuple[str, np.ndarray, bool]]) -> bytes:
    """Serialize named arrays under ``manifest``; each item is (name, array, trainable)."""
    entries = []
    payload = []
    for name, array, trainable in arrays:
        arr = np.ascontiguousarray(array, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "trainable": bool(trainable)})
        payload.append(arr.tobytes(order="C"))
    document = dict(manifest)
    document["params"] = entries
    text = json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _CKPT_HEADER.pack(magic, VERSION, len(text)) + text + b"".join(payload)


def decode_checkpoint(buf: bytes, magic: bytes) -> tuple[dict[str, Any], list[tuple[str, np.ndarray, bool]]]:
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header", len(buf))
    found, version, length = _CKPT_HEADER.unpack_from(buf, 0)
    if found != magic:
        raise FormatError(f"bad magic {found!r}, expected {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    offset = _CKPT_HEADER.size
    if len(buf) < offset + length:
        raise FormatError("truncated manifest", len(buf))
    try:
        manifest = json.loads(buf[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}", offset) from None
    offset += length
    arrays = []
    for entry in manifest.get("params", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 4 * count
        if len(buf) < offset + nbytes:
            raise FormatError(f"payload for {entry['name']!r} truncated", len(buf))
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
        arrays.append((entry["name"], arr.astype(np.float32), bool(entry.get("trainable", True))))
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset)
    return manifest, arrays


def write_checkpoint(path: str | Path, magic: bytes, manifest: dict[str, Any],
                     arrays: Iterable[tuple[str, np.ndarray, bool]]) -> None:
    Path(path).write_bytes(encode_checkpoint(magic, manifest, arrays))
    logger.info("wrote checkpoint %s", path)


def read_checkpoint(path: str | Path, magic: bytes):
    return decode_checkpoint(Path(path).read_bytes(), magic)
