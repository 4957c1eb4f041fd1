"""Parameter checkpoint container.

Layout (version ``DS3M-CKPT-1``)::

    b"DS3M-CKPT-1\\n"
    uint64 little-endian   length N of the JSON header
    N bytes                UTF-8 JSON header (keys sorted)
    payload                concatenated little-endian float64 tensors

The header holds ``family`` ("ds3m" or "baseline-gru"), ``model_config``,
free-form ``meta`` (normalisation statistics, best validation loss, ...)
and ``tensors``: a list of ``{name, shape, offset, trainable}`` where
``offset`` counts float64 elements from the start of the payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Iterable, Tuple

import numpy as np
import torch

from .diffcore import DTYPE

MAGIC = b"DS3M-CKPT-1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, family: str, model_config: dict,
                    tensors: Iterable[Tuple[str, torch.Tensor]], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors:
        arr = np.ascontiguousarray(t.detach().numpy(), dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "trainable": bool(t.requires_grad)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"family": family, "model_config": model_config, "meta": meta or {},
                         "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> Tuple[dict, Dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a DS3M-CKPT-1 file")
    pos = len(MAGIC)
    (n,) = struct.unpack("<Q", raw[pos: pos + 8])
    pos += 8
    header = json.loads(raw[pos: pos + n].decode("utf-8"))
    payload = np.frombuffer(raw[pos + n:], dtype="<f8")
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = payload[e["offset"]: e["offset"] + count]
        if arr.size != count:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        t = torch.tensor(arr.reshape(e["shape"]), dtype=DTYPE)
        t.requires_grad_(e["trainable"])
        tensors[e["name"]] = t
    return header, tensors


def assign(named: Iterable[Tuple[str, torch.Tensor]], values: Dict[str, torch.Tensor]) -> None:
    """Copy checkpoint values into freshly initialised parameters, in place."""
    with torch.no_grad():
        for name, t in named:
            if name not in values:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            if tuple(values[name].shape) != tuple(t.shape):
                raise CheckpointError(f"shape mismatch for {name}: {tuple(values[name].shape)} vs {tuple(t.shape)}")
            t.copy_(values[name])
