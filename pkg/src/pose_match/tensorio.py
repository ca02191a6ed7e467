"""TNSR tensor container.

One record per tensor::

    b"TNSR" | u8 version | u8 dtype | u8 ndim | ndim x u64 shape | payload

Payload is row-major, little-endian. dtype codes: 0 = f32, 1 = f64, 2 = i32.
A named collection is a ``.tnsr`` file of back-to-back records plus a JSON
sidecar (``<file>.json``) listing names, byte offsets and free-form metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import CorruptFile

MAGIC = b"TNSR"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int32"): 2}


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype.kind == "b" or arr.dtype.kind in "iu":
        arr = arr.astype(np.int32)
    code = CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        arr = arr.astype(np.float64)
        code = 1
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one record at ``offset``; returns the array and the next offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise CorruptFile(f"bad magic at byte {offset}")
    if len(buf) < offset + 7:
        raise CorruptFile("truncated header")
    version, code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise CorruptFile(f"unsupported version {version}")
    if code not in DTYPES:
        raise CorruptFile(f"unknown dtype code {code}")
    pos = offset + 7
    if len(buf) < pos + 8 * ndim:
        raise CorruptFile("truncated shape")
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dt = DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise CorruptFile("truncated payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise CorruptFile("trailing bytes after tensor")
    return arr


def manifest_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_collection(path, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write tensors in the given order plus the JSON manifest."""
    chunks = []
    entries = []
    offset = 0
    for name, arr in tensors.items():
        rec = encode_tensor(arr)
        a = np.asarray(arr)
        entries.append({"name": name, "offset": offset, "shape": list(a.shape)})
        chunks.append(rec)
        offset += len(rec)
    Path(path).write_bytes(b"".join(chunks))
    manifest = {"format": "TNSR", "version": VERSION, "tensors": entries, "meta": meta or {}}
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_collection(path) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read a collection; returns ``(tensors, meta)``."""
    mpath = manifest_path(path)
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"cannot read manifest {mpath}: {exc}") from exc
    if manifest.get("format") != "TNSR":
        raise CorruptFile("manifest is not a TNSR collection")
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptFile(f"cannot read {path}: {exc}") from exc
    out: Dict[str, np.ndarray] = {}
    end = 0
    for entry in manifest.get("tensors", []):
        if entry["offset"] != end:
            raise CorruptFile(f"unexpected offset for {entry['name']}")
        arr, end = decode_tensor(buf, entry["offset"])
        if list(arr.shape) != list(entry["shape"]):
            raise CorruptFile(f"shape mismatch for {entry['name']}")
        out[entry["name"]] = arr
    if end != len(buf):
        raise CorruptFile("trailing bytes after last tensor")
    return out, manifest.get("meta", {})
