"""Binary array container and small file helpers.

Container layout::

    b"RLGN\\x01"            magic + format version
    uint64 little-endian    header length in bytes
    header                  UTF-8 JSON, sorted keys, compact separators
    payload                 concatenated array buffers, little-endian, C order

The header holds ``meta`` (free-form JSON) and ``arrays``, a map from name to
``{"dtype", "shape", "offset", "nbytes"}``. Arrays are written in sorted-name
order and the JSON encoding is canonical, so save -> load -> save reproduces
the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"RLGN\x01"


class ContainerError(ValueError):
    pass


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def encode_arrays(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    index = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind not in "fiub":
            raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        buf = arr.tobytes()
        index[name] = {
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(buf),
        }
        chunks.append(buf)
        offset += len(buf)
    header = canonical_json({"arrays": index, "meta": dict(meta or {})})
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_arrays(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if not blob.startswith(MAGIC):
        raise ContainerError("bad magic; not a realign container")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", blob[pos : pos + 8])
    pos += 8
    header = json.loads(blob[pos : pos + hlen])
    base = pos + hlen
    arrays = {}
    for name, info in header["arrays"].items():
        start = base + info["offset"]
        raw = blob[start : start + info["nbytes"]]
        if len(raw) != info["nbytes"]:
            raise ContainerError(f"truncated payload for {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"]).copy()
    return arrays, header["meta"]


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> Path:
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
    return path


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    return atomic_write_bytes(path, encode_arrays(arrays, meta))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode_arrays(Path(path).read_bytes())


def write_json(path, obj: Any) -> Path:
    return atomic_write_bytes(path, json.dumps(obj, sort_keys=True, indent=2, allow_nan=False).encode() + b"\n")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class JsonlLog:
    """Append-only line-delimited JSON log."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: Mapping[str, Any]) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]
