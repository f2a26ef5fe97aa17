"""Checkpoint container.

Layout::

    <UTF-8 JSON header>\\n
    <uint64 little-endian: byte length of the JSON header>
    <payload: little-endian float64 tensors, back to back>

The header maps tensor name -> {"shape", "offset", "count"} with offsets in
bytes from the start of the payload.  The reserved key ``__metadata__`` holds
free-form JSON (config, class names, meta statistics, training state).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

METADATA_KEY = "__metadata__"
_LEN = struct.Struct("<Q")


def save_checkpoint(path, tensors: dict, metadata: dict | None = None) -> None:
    """Write ``tensors`` (name -> array or Tensor) atomically to ``path``."""
    path = Path(path)
    header = {METADATA_KEY: metadata or {}}
    arrays = []
    offset = 0
    for name, value in tensors.items():
        if name == METADATA_KEY:
            raise FormatError(f"tensor name {METADATA_KEY!r} is reserved")
        arr = np.ascontiguousarray(getattr(value, "data", value), dtype="<f8")
        header[name] = {"shape": list(arr.shape), "offset": offset, "count": int(arr.size)}
        arrays.append(arr)
        offset += arr.nbytes
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(blob)
        f.write(b"\n")
        f.write(_LEN.pack(len(blob)))
        for arr in arrays:
            f.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (name -> float64 array, metadata); raises FormatError with a byte position."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise FormatError(f"{path}: header terminator not found (byte {len(raw)})")
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise FormatError(f"{path}: corrupt header at byte {pos}: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header at byte 0 is not a JSON object")
    if len(raw) < end + 1 + _LEN.size:
        raise FormatError(f"{path}: truncated header length at byte {end + 1}")
    (declared,) = _LEN.unpack_from(raw, end + 1)
    if declared != end:
        raise FormatError(f"{path}: declared header length {declared} != actual {end} (byte {end + 1})")
    start = end + 1 + _LEN.size
    payload_len = len(raw) - start
    metadata = header.pop(METADATA_KEY, {})
    tensors = {}
    for name, entry in header.items():
        try:
            shape, offset, count = tuple(entry["shape"]), int(entry["offset"]), int(entry["count"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: malformed header entry {name!r}") from None
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise FormatError(f"{path}: {name!r} shape {shape} disagrees with count {count}")
        if offset < 0 or offset + 8 * count > payload_len:
            raise FormatError(f"{path}: {name!r} payload exceeds file at byte {start + offset + 8 * count}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=start + offset).astype(np.float64).reshape(shape)
    return tensors, metadata
