"""Binary tensor files and named-tensor archives.

Tensor file layout (all integers little-endian)::

    b"STCN" | version u32 | rank u32 | rank x extent u64 | float64 payload

Archive layout::

    b"STCA" | version u32 | manifest length u64 | manifest JSON (utf-8) | payload

The manifest is ``{"meta": {...}, "tensors": [{"name", "rank", "extents",
"offset"}, ...]}``; each offset points into the payload at a complete tensor
record in the format above.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import InputError
from .tensor import Tensor

MAGIC = b"STCN"
ARCHIVE_MAGIC = b"STCA"
VERSION = 1

PathLike = Union[str, Path]


def _as_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def tensor_to_bytes(t) -> bytes:
    arr = np.asarray(_as_array(t), dtype="<f8", order="C")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor record starting at ``offset``; returns the array and the end offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise InputError("not a tensor record (bad magic)")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise InputError(f"unsupported tensor format version {version}")
    pos = offset + 12
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    end = pos + 8 * count
    if end > len(buf):
        raise InputError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
    return arr, end


def save_tensor(path: PathLike, t) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path: PathLike) -> np.ndarray:
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return arr


def save_archive(path: PathLike, tensors: Mapping[str, object], meta: Optional[dict] = None) -> None:
    payload = io.BytesIO()
    entries = []
    for name, t in tensors.items():
        arr = _as_array(t)
        entries.append({"name": name, "rank": arr.ndim, "extents": list(arr.shape), "offset": payload.tell()})
        payload.write(tensor_to_bytes(arr))
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC + struct.pack("<IQ", VERSION, len(manifest)))
        fh.write(manifest)
        fh.write(payload.getvalue())


def load_archive(path: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != ARCHIVE_MAGIC:
        raise InputError(f"{path}: not a tensor archive")
    version, mlen = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise InputError(f"{path}: unsupported archive version {version}")
    start = 16
    manifest = json.loads(buf[start:start + mlen].decode())
    base = start + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        arr, _ = tensor_from_bytes(buf, base + entry["offset"])
        if list(arr.shape) != entry["extents"]:
            raise InputError(f"{path}: extents of {entry['name']!r} disagree with manifest")
        tensors[entry["name"]] = arr
    return tensors, manifest["meta"]
