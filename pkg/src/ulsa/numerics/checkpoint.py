"""Parameter checkpoints: a flat binary container of named float64 tensors.

Layout: 8-byte magic, u64-le header length, UTF-8 JSON header, then the raw
little-endian float64 payload. The header lists tensor names, shapes and byte
offsets into the payload. Tensor order follows dict insertion order, so a
checkpoint of the same model is byte-reproducible.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import UlsaError

MAGIC = b"ULSACKP1"


def save_checkpoint(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise UlsaError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    payload = raw[16 + hlen :]
    out: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        start, n = ent["offset"], ent["nbytes"]
        arr = np.frombuffer(payload[start : start + n], dtype="<f8").reshape(ent["shape"])
        out[ent["name"]] = arr.astype(np.float64)
    return out
