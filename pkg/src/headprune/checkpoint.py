"""Checkpoint container: JSON header followed by raw little-endian tensors.

Layout::

    u64 little-endian   header length in bytes
    header              UTF-8 JSON {format_version, config, meta, tensors}
    payload             concatenated tensor bytes

``tensors`` maps each name to ``{"dtype", "shape", "offset", "nbytes"}`` with
offsets relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index = {}
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        index[name] = {"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = {"format_version": FORMAT_VERSION, "config": config, "meta": meta or {}, "tensors": index}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)
    tmp.replace(path)


def _parse_header(path, body: bytes) -> dict:
    try:
        header = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: unreadable checkpoint header") from e
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format")
    return header


def read_header(path) -> dict:
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) < 8:
            raise DataError(f"{path}: not a checkpoint (file too short)")
        (n,) = struct.unpack("<Q", prefix)
        return _parse_header(path, f.read(n))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DataError(f"{path}: not a checkpoint (file too short)")
    (n,) = struct.unpack("<Q", data[:8])
    header = _parse_header(path, data[8 : 8 + n])
    base = 8 + n
    arrays = {}
    for name, ent in header["tensors"].items():
        start = base + ent["offset"]
        buf = data[start : start + ent["nbytes"]]
        if len(buf) != ent["nbytes"]:
            raise DataError(f"{path}: tensor {name!r} is truncated")
        arrays[name] = np.frombuffer(buf, dtype=np.dtype(ent["dtype"])).reshape(ent["shape"]).copy()
    return header, arrays
