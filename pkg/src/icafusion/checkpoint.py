"""Self-verifying binary container for named arrays plus JSON metadata.

Layout (all integers little-endian)::

    b"ICAFCKPT"                 8-byte magic
    uint32 format_version
    uint64 header_length
    header                      UTF-8 JSON, sorted keys: {"meta": ..., "tensors": [...]}
    payload                     raw C-order array bytes, back to back
    sha256                      32-byte digest of everything above

Each ``tensors`` entry is ``{"name", "dtype", "shape", "offset", "nbytes"}``
with ``offset`` relative to the start of the payload.  Writing is atomic
(temporary file, then rename).
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

from .errors import IntegrityError, VersionError

MAGIC = b"ICAFCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().contiguous().numpy()
    # np.ascontiguousarray would promote 0-d arrays (Adam step counters) to 1-d.
    return np.asarray(value).copy(order="C")


def tensor_hash(tensors: dict, prefixes: tuple[str, ...] = ()) -> str:
    """SHA-256 over name, dtype, shape and bytes of the selected arrays, in name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        if prefixes and not name.startswith(prefixes):
            continue
        arr = _to_numpy(tensors[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def encode(tensors: dict, meta: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[dict, dict]:
    if len(blob) < _PREFIX.size + 32:
        raise IntegrityError("checkpoint is truncated")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise IntegrityError("not an icafusion checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this library reads version {FORMAT_VERSION}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint digest mismatch (truncated or corrupted file)")
    start = _PREFIX.size
    header = json.loads(body[start:start + header_len])
    payload = memoryview(body)[start + header_len:]
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise IntegrityError(f"tensor {e['name']} extends past the payload")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, header["meta"]


def save(path, tensors: dict, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(tensors, meta)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> tuple[dict, dict]:
    return decode(Path(path).read_bytes())
