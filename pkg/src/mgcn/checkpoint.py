"""MGCN binary container.

Layout::

    b"MGCN"                 4 bytes
    version                 uint32 little-endian
    metadata length         uint64 little-endian
    metadata                UTF-8 JSON {"meta": ..., "tensors": [...]}
    tensor data             little-endian float64, concatenated

Each tensor directory entry holds ``name``, ``shape``, ``offset`` (bytes from
the start of the data block) and ``kind`` (``"real"`` or ``"index"``; index
tensors are stored as exact float64 and converted back to int64 on load).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import CheckpointError

MAGIC = b"MGCN"
VERSION = 1


def _encode(meta, tensors):
    directory = []
    chunks = []
    offset = 0
    for name in tensors:
        arr = np.asarray(tensors[name])
        kind = "index" if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool else "real"
        if kind == "index" and arr.size and np.abs(arr).max() >= 2**53:
            raise CheckpointError(f"index tensor {name!r} exceeds float64 exact range")
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "kind": kind})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": directory}, sort_keys=True, separators=(",", ":")).encode()
    return b"".join([MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header)), header] + chunks)


def save_container(path, meta: dict, tensors: dict) -> None:
    """Atomically write ``meta`` and named arrays (written via ``.tmp`` + rename)."""
    path = Path(path)
    blob = _encode(meta, tensors)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_container(path):
    """Return ``(meta, tensors)`` from an MGCN file."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not an MGCN container")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode())
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=start).astype(np.float64).reshape(entry["shape"])
        if entry["kind"] == "index":
            arr = arr.astype(np.int64)
        tensors[entry["name"]] = arr
    return header["meta"], tensors


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def pack_sparse(prefix: str, m, tensors: dict) -> None:
    m = sp.csr_matrix(m)
    tensors[f"{prefix}.indptr"] = m.indptr.astype(np.int64)
    tensors[f"{prefix}.indices"] = m.indices.astype(np.int64)
    tensors[f"{prefix}.data"] = m.data
    tensors[f"{prefix}.shape"] = np.array(m.shape, dtype=np.int64)


def unpack_sparse(prefix: str, tensors: dict) -> sp.csr_matrix:
    shape = tuple(int(s) for s in tensors[f"{prefix}.shape"])
    return sp.csr_matrix(
        (tensors[f"{prefix}.data"], tensors[f"{prefix}.indices"], tensors[f"{prefix}.indptr"]), shape=shape
    )
