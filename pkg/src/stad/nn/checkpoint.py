"""Checkpoint container: plain-text manifest plus a little-endian float64 blob.

The manifest lives at ``path`` and the blob at ``path + ".bin"``. Manifest
lines::

    stad-checkpoint 1
    meta <key> <value>
    tensor <name> <comma-separated shape or -> <byte offset>

Tensors are concatenated in manifest order.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .layers import Parameter

MANIFEST_HEADER = "stad-checkpoint 1"


class CheckpointError(ValueError):
    pass


def blob_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".bin")


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray],
                    meta: Mapping[str, object] | None = None) -> None:
    path = Path(path)
    lines = [MANIFEST_HEADER]
    for key, value in (meta or {}).items():
        text = str(value)
        if any(c.isspace() for c in key) or "\n" in text:
            raise CheckpointError(f"invalid meta entry {key!r}")
        lines.append(f"meta {key} {text}")
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        a = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        shape = ",".join(str(d) for d in a.shape) or "-"
        lines.append(f"tensor {name} {shape} {offset}")
        chunks.append(a.tobytes())
        offset += a.nbytes
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    blob_path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise CheckpointError(f"{path}: not a checkpoint manifest")
    blob = blob_path(path).read_bytes()
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if not line:
            continue
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            name, shape_text, offset_text = rest.split(" ")
            shape = () if shape_text == "-" else tuple(int(d) for d in shape_text.split(","))
            offset = int(offset_text)
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(blob):
                raise CheckpointError(f"{path}: blob truncated at tensor {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        else:
            raise CheckpointError(f"{path}: unrecognized manifest line {line!r}")
    return tensors, meta


def params_to_tensors(params: Iterable[Parameter], prefix: str = "") -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for p in params:
        key = prefix + p.name
        if key in out:
            raise CheckpointError(f"duplicate parameter name {key!r}")
        out[key] = p.value
    return out


def load_into(params: Iterable[Parameter], tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    for p in params:
        key = prefix + p.name
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        if tensors[key].shape != p.shape:
            raise CheckpointError(f"tensor {key!r}: shape {tensors[key].shape} != {p.shape}")
        p.value[...] = tensors[key]
