"""Binary checkpoint format.

Layout::

    b"RHYTHMCK"                  8 bytes magic
    uint32 little-endian         format version
    uint32 little-endian         header length in bytes
    header                       UTF-8 JSON, sorted keys
    payload                      float32 little-endian, parameters concatenated
                                 in the order of header["params"]

The header always carries ``kind``, ``params`` (a list of ``[name, shape]``
pairs) and ``speakers``; encoder checkpoints add ``config`` and
``vocab_sha256``.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from rhythmid._io import atomic_write_bytes

MAGIC = b"RHYTHMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: dict[str, np.ndarray], header: dict) -> bytes:
    header = dict(header)
    header["params"] = [[name, list(arr.shape)] for name, arr in params.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.values())
    return MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + payload


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    params: dict[str, np.ndarray] = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape, dtype=np.int64))
        chunk = data[offset : offset + 4 * n]
        if len(chunk) != 4 * n:
            raise CheckpointError(f"truncated payload at parameter {name}")
        params[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        offset += 4 * n
    if offset != len(data):
        raise CheckpointError("trailing bytes after payload")
    return params, header


def save(path: str | os.PathLike, params: dict[str, np.ndarray], header: dict) -> None:
    atomic_write_bytes(path, dumps(params, header))


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
