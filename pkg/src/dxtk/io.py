"""Atomic file writes and the DXTK checkpoint container."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DXTK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_jsonl(path, records) -> None:
    atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in records))


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_checkpoint(path, params: np.ndarray, meta: dict) -> None:
    """Write ``params`` as little-endian float32 plus a ``.json`` sidecar."""
    flat = np.ascontiguousarray(params, dtype="<f4").reshape(-1)
    header = MAGIC + struct.pack("<IQ", FORMAT_VERSION, flat.size)
    atomic_write_bytes(path, header + flat.tobytes())
    write_json(sidecar_path(path), meta)


def load_checkpoint(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    body = raw[16:]
    if len(body) != 4 * count:
        raise CheckpointError(f"{path}: expected {count} floats, found {len(body) // 4}")
    params = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return params, read_json(sidecar_path(path))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")
