"""DAFW v1 weight files.

Layout (all integers little-endian ``uint32`` unless noted)::

    b"DAFW" | version | role_len | role (utf-8) | n_tensors |
    n_tensors x ( name_len | name (utf-8) | rank | dims[rank] | float32 payload )

Files are parsed completely before anything is returned, so a truncated or
corrupt file never yields partial weights.
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ..errors import FormatError, SchemaError

MAGIC = b"DAFW"
VERSION = 1


@dataclass
class WeightFile:
    """Named float32 tensors plus a role tag (``teacher``, ``student``, ``model``, ...)."""

    role: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def encode(weights: WeightFile) -> bytes:
    buf = io.BytesIO()
    role = weights.role.encode("utf-8")
    buf.write(MAGIC + _u32(VERSION) + _u32(len(role)) + role + _u32(len(weights.tensors)))
    for name in sorted(weights.tensors):
        arr = np.ascontiguousarray(weights.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(_u32(len(nb)) + nb + _u32(arr.ndim))
        for d in arr.shape:
            buf.write(_u32(d))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode(data: bytes) -> WeightFile:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise SchemaError(f"weight file truncated at byte {pos} (wanted {n} more)")
        out = view[pos:pos + n]
        pos += n
        return out

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if len(data) < 4 or bytes(view[:4]) != MAGIC:
        raise FormatError("not a DAFW weight file (bad magic)")
    pos = 4
    version = u32()
    if version != VERSION:
        raise FormatError(f"unsupported DAFW version {version} (expected {VERSION})")
    role = bytes(take(u32())).decode("utf-8")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name = bytes(take(u32())).decode("utf-8")
        rank = u32()
        dims = tuple(u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = arr
    if pos != len(view):
        raise SchemaError(f"{len(view) - pos} trailing bytes after last tensor")
    return WeightFile(role, tensors)


def save_weights(weights: WeightFile, path: str | Path) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(weights))
    os.replace(tmp, path)


def load_weights(path: str | Path, role: str | None = None) -> WeightFile:
    """Read a DAFW file; ``role`` rewrites the stored role tag (values untouched)."""
    w = decode(Path(path).read_bytes())
    if role is not None:
        w.role = role
    return w


def module_tensors(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Floating-point parameters and buffers of ``module`` as float32 arrays."""
    out = {}
    for name, t in module.state_dict().items():
        if t.is_floating_point():
            out[prefix + name] = t.detach().cpu().numpy().astype(np.float32, copy=True)
    return out


def load_module(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy tensors into ``module``; every floating state entry must be present with matching shape."""
    state = module.state_dict()
    wanted = {k: v for k, v in state.items() if v.is_floating_point()}
    staged = {}
    for name, ref in wanted.items():
        key = prefix + name
        if key not in tensors:
            raise SchemaError(f"missing tensor {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(ref.shape):
            raise SchemaError(f"tensor {key!r} has shape {arr.shape}, expected {tuple(ref.shape)}")
        staged[name] = torch.from_numpy(np.array(arr, dtype=np.float32)).to(ref.dtype)
    with torch.no_grad():
        for name, t in staged.items():
            state[name].copy_(t)


def checksum(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return h.hexdigest()


def module_checksum(module: nn.Module) -> str:
    return checksum(module_tensors(module))
