"""Checkpoint files: a text header of (name, shape, byte offset) rows followed by
raw little-endian float64 payload.

    LORD-CKPT 1
    meta config_hash 3fa2...
    tensor enc.agent.0.W 50x64 0
    tensor enc.agent.0.b 64 25600
    end
    <payload bytes>

Offsets count from the first payload byte.  Names are unique; adapter tensors
use the ``adapter/`` prefix so they can be separated from the base on disk.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MAGIC = "LORD-CKPT 1"
ADAPTER_PREFIX = "adapter/"


class CheckpointError(ValueError):
    pass


def _shape_str(shape) -> str:
    return "x".join(str(n) for n in shape) if len(shape) else "-"


def _parse_shape(s: str) -> tuple:
    return () if s == "-" else tuple(int(n) for n in s.split("x"))


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    lines = [MAGIC]
    for k, v in sorted((meta or {}).items()):
        if any(c.isspace() for c in f"{k}{v}"):
            raise CheckpointError(f"meta entries may not contain whitespace: {k}={v}")
        lines.append(f"meta {k} {v}")
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name contains whitespace: {name!r}")
        lines.append(f"tensor {name} {_shape_str(arr.shape)} {offset}")
        offset += arr.size * 8
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for name in sorted(tensors):
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, expected_shapes: dict | None = None) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``.  ``expected_shapes`` is validated exactly."""
    data = Path(path).read_bytes()
    end = data.find(b"\nend\n")
    if not data.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload = memoryview(data)[end + 5:]
    tensors, meta = {}, {}
    for line in data[:end].decode("ascii").splitlines()[1:]:
        kind, *rest = line.split(" ")
        if kind == "meta":
            meta[rest[0]] = rest[1]
        elif kind == "tensor":
            name, shape, offset = rest[0], _parse_shape(rest[1]), int(rest[2])
            n = int(np.prod(shape)) if shape else 1
            if offset + 8 * n > len(payload):
                raise CheckpointError(f"{path}: tensor {name} runs past end of file")
            tensors[name] = np.frombuffer(payload, dtype="<f8", count=n,
                                          offset=offset).astype(np.float64).reshape(shape)
        else:
            raise CheckpointError(f"{path}: bad header line {line!r}")
    if expected_shapes is not None:
        missing = set(expected_shapes) - set(tensors)
        extra = set(tensors) - set(expected_shapes)
        if missing or extra:
            raise CheckpointError(f"{path}: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, shape in expected_shapes.items():
            if tensors[name].shape != tuple(shape):
                raise CheckpointError(
                    f"{path}: {name} has shape {tensors[name].shape}, expected {tuple(shape)}")
    return tensors, meta


def split_adapters(tensors: dict) -> tuple[dict, dict]:
    base = {k: v for k, v in tensors.items() if not k.startswith(ADAPTER_PREFIX)}
    adapters = {k: v for k, v in tensors.items() if k.startswith(ADAPTER_PREFIX)}
    return base, adapters
