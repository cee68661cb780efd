"""Self-describing binary container for parameter tensors.

Layout::

    [version: u8][kind: 4 ascii bytes][header length: u32 LE][header JSON][blob]

The header holds caller metadata plus a tensor index (name, dtype, shape,
offset into the blob).  Tensors are stored little-endian in index order, and
the JSON is written with sorted keys, so equal inputs give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


def _to_numpy(t):
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.ascontiguousarray(t)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def pack(kind: bytes, meta: dict, tensors: dict) -> bytes:
    if len(kind) != 4:
        raise ValueError("kind must be exactly 4 bytes")
    index, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = _to_numpy(value)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True, separators=(",", ":")).encode()
    return bytes([FORMAT_VERSION]) + kind + struct.pack("<I", len(header)) + header + b"".join(chunks)


def unpack(data: bytes, kind: bytes | None = None) -> tuple[dict, dict]:
    if not data or data[0] != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {data[:1]!r}")
    if kind is not None and data[1:5] != kind:
        raise ValueError(f"expected a {kind!r} file, found {data[1:5]!r}")
    (hlen,) = struct.unpack("<I", data[5:9])
    header = json.loads(data[9 : 9 + hlen])
    blob = memoryview(data)[9 + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return header["meta"], tensors


def atomic_write(path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def state_hash(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, value in module.state_dict().items():
        h.update(name.encode())
        h.update(_to_numpy(value).tobytes())
    return h.hexdigest()
