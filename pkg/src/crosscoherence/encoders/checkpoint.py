"""CCKPT1 tensor checkpoints.

Layout: magic ``CCKPT1``, u32 tensor count, then per tensor: u32 name
length, utf-8 name, u32 rank, rank x u32 dims, float32 little-endian data.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"CCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, object]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(value, dtype="<f4")
        key = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(key)) + key)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a CCKPT1 checkpoint")
    pos = len(MAGIC)
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from None
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def save_module(path, module: nn.Module) -> None:
    save_checkpoint(path, module.state_dict())


def load_module(path, module: nn.Module) -> nn.Module:
    """Load a checkpoint into ``module``; shapes and names must match exactly."""
    stored = load_checkpoint(path)
    expected: Dict[str, torch.Tensor] = module.state_dict()
    missing = set(expected) - set(stored)
    extra = set(stored) - set(expected)
    if missing or extra:
        raise CheckpointError(f"{path}: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, ref in expected.items():
        if tuple(ref.shape) != stored[name].shape:
            raise CheckpointError(
                f"{path}: {name} has shape {stored[name].shape}, model expects {tuple(ref.shape)}")
    module.load_state_dict({k: torch.as_tensor(v, dtype=expected[k].dtype) for k, v in stored.items()})
    return module
