"""Deterministic weight checkpoint container.

File layout (version 1)::

    MTSLSTM-CKPT 1\\n
    <header length in bytes, decimal>\\n
    <JSON header>\\n
    <raw array bytes>

The header is ``{"version": 1, "config_hash": str, "arrays": [{"name", "dtype",
"shape", "offset", "nbytes"}, ...]}`` serialized with sorted keys. Arrays are
stored C-ordered and little-endian, back to back, in the order given. The file
contains no timestamps, so equal inputs give byte-identical files.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

MAGIC = b"MTSLSTM-CKPT 1\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Dict[str, np.ndarray], config_hash: str) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"version": VERSION, "config_hash": config_hash, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(b"%d\n" % len(header))
        fh.write(header + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_hash: Optional[str] = None) -> Tuple[Dict[str, np.ndarray], str]:
    """Arrays (in stored order) and the stored config hash."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    nl = raw.index(b"\n", pos)
    size = int(raw[pos:nl])
    header = json.loads(raw[nl + 1:nl + 1 + size])
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CheckpointError(f"{path}: config hash mismatch ({header['config_hash'][:12]} "
                              f"stored, {expected_hash[:12]} expected)")
    base = nl + 1 + size + 1
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        buf = raw[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated array {e['name']}")
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, header["config_hash"]
