"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"CSCK"                      magic
    u32 version                  currently 1
    u32 header_len               bytes of UTF-8 JSON that follow
    header JSON                  free-form config document
    u32 n_tensors
    repeated n_tensors times:
        u16 name_len, name (UTF-8)
        u8  ndim, u32 dims[ndim]
        f32 data[prod(dims)]     C order, little-endian

Integer buffers are stored as f32 too; every tensor in these models is
float32, so a round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch

from .errors import CorruptFileError

MAGIC = b"CSCK"
VERSION = 1


def save_checkpoint(path, tensors: dict, header: dict):
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path):
    """-> (header dict, {name: float32 tensor})."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CorruptFileError(f"truncated checkpoint {path}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CorruptFileError(f"{path} is not a checkpoint")
    version, head_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CorruptFileError(f"unsupported checkpoint version {version}")
    header = json.loads(take(head_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = torch.from_numpy(arr)
    if pos != len(data):
        raise CorruptFileError(f"trailing bytes in checkpoint {path}")
    return header, tensors


def save_module(path, module: torch.nn.Module, header: dict):
    save_checkpoint(path, module.state_dict(), header)


def load_module_state(module: torch.nn.Module, tensors: dict):
    state = module.state_dict()
    missing = set(state) - set(tensors)
    if missing:
        raise CorruptFileError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    module.load_state_dict({k: tensors[k].to(state[k].dtype) for k in state})
    return module
