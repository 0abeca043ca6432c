"""Binary checkpoint files: magic + version + JSON header + raw float64 arrays."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FPOCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    meta = json.dumps({"header": header, "arrays": manifest}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(meta)))
        fh.write(meta)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, meta_len = struct.unpack_from("<IQ", raw, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    meta = json.loads(raw[pos: pos + meta_len])
    body = raw[pos + meta_len:]
    arrays = {}
    for entry in meta["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return meta["header"], arrays
