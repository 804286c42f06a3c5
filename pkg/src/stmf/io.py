"""STMF1 tensor files and deterministic JSON documents.

Layout of a tensor file: the 6-byte magic ``b"STMF1\\0"``, one byte dtype
code (0 = float64), one byte ``ndim``, ``ndim`` little-endian uint64 sizes,
then the row-major little-endian float64 payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"STMF1\0"
DTYPE_F64 = 0


def tensor_bytes(arr) -> bytes:
    a = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
    if a.ndim > 255:
        raise ValueError("too many dimensions")
    head = MAGIC + struct.pack("<BB", DTYPE_F64, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def parse_tensor(buf: bytes) -> np.ndarray:
    if buf[:6] != MAGIC:
        raise ValueError("not an STMF1 tensor file")
    dtype, ndim = struct.unpack_from("<BB", buf, 6)
    if dtype != DTYPE_F64:
        raise ValueError(f"unsupported dtype code {dtype}")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 8)
    off = 8 + 8 * ndim
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != 8 * count:
        raise ValueError("payload size does not match shape")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_tensor(path, arr) -> None:
    _atomic_write(Path(path), tensor_bytes(arr))


def read_tensor(path) -> np.ndarray:
    return parse_tensor(Path(path).read_bytes())


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, default=_default) + "\n"


def write_json(path, doc: Any) -> None:
    _atomic_write(Path(path), dumps(doc).encode())


def read_json(path) -> Any:
    return json.loads(Path(path).read_text())


def config_hash(doc: Any) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=_default).encode()).hexdigest()[:16]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
