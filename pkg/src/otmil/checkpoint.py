"""Deterministic checkpoint container (layout in docs/FORMATS.md)."""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import PARAM_DIMS, ModelParams

MAGIC = b"OTMILCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: ModelParams, config: dict, seed: int, epochs: int,
                      extra: dict | None = None) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name, arr in params.as_dict().items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "dims": list(PARAM_DIMS[name]),
                        "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = {"config": config, "seed": int(seed), "epochs": int(epochs),
              "tensors": tensors, "extra": extra or {}}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> tuple[ModelParams, dict]:
    if len(data) < _PREFIX.size + 4:
        raise CheckpointError("checkpoint truncated")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    start = _PREFIX.size
    header = json.loads(data[start: start + head_len].decode("utf-8"))
    blob = data[start + head_len: -4]
    arrays = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        if t["offset"] + 8 * count > len(blob):
            raise CheckpointError(f"tensor {t['name']} runs past the end of the file")
        arrays[t["name"]] = np.frombuffer(blob, dtype="<f8", count=count,
                                          offset=t["offset"]).reshape(t["shape"]).copy()
    missing = set(PARAM_DIMS) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)}")
    return ModelParams(**arrays), header


def save_checkpoint(path, params, config, seed, epochs, extra=None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, config, seed, epochs, extra))


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    return decode_checkpoint(Path(path).read_bytes())
