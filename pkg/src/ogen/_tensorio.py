"""Flat binary tensor container: a JSON manifest followed by raw data.

Layout: u32 manifest length, UTF-8 JSON manifest, then each tensor's raw
little-endian bytes in manifest order. The manifest's "tensors" list
carries name/shape/dtype; extra manifest keys are caller metadata. JSON
is serialized with sorted keys so identical content gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

_DTYPES = {"f4": "<f4", "f8": "<f8"}


def write_tensor_file(path, tensors: dict, meta: dict) -> None:
    """tensors maps name -> ndarray; meta is JSON-serializable metadata."""
    entries = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = "f4" if arr.dtype == np.float32 else "f8"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    manifest = dict(meta)
    manifest["tensors"] = entries
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(mbytes)))
        fh.write(mbytes)
        for blob in blobs:
            fh.write(blob)


def read_tensor_file(path):
    """Returns (tensors dict, meta dict without the tensor list)."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    data = p.read_bytes()
    if len(data) < 4:
        raise DataError(f"{p}: too short to hold a manifest")
    (mlen,) = struct.unpack("<I", data[:4])
    if 4 + mlen > len(data):
        raise DataError(f"{p}: truncated manifest")
    try:
        manifest = json.loads(data[4 : 4 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{p}: unreadable manifest ({exc})") from exc
    entries = manifest.pop("tensors", None)
    if not isinstance(entries, list):
        raise DataError(f"{p}: manifest lacks a tensor list")
    tensors = {}
    pos = 4 + mlen
    for entry in entries:
        shape = tuple(entry["shape"])
        dtype = _DTYPES.get(entry.get("dtype", "f4"))
        if dtype is None:
            raise DataError(f"{p}: unknown dtype for tensor {entry.get('name')!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * int(dtype[-1])
        if pos + nbytes > len(data):
            raise DataError(f"{p}: truncated data for tensor {entry['name']!r}")
        arr = np.frombuffer(data[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
        tensors[entry["name"]] = arr
        pos += nbytes
    if pos != len(data):
        raise DataError(f"{p}: {len(data) - pos} trailing bytes")
    return tensors, manifest
