"""Binary weight-container files.

Layout (all little-endian, bit-exact):

    magic   4 bytes  b"CALF"
    version u32      = 1
    count   u32      number of tensors
    per tensor:
        name_len u32
        name     UTF-8 bytes
        dtype    u8   0 = float32, 1 = float64
        rank     u8
        dims     rank x u64
        data     raw row-major values

Readers fail with positioned errors on any truncation or bad field;
writers keep dict insertion order so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CALF"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

_MAX_NAME = 4096
_MAX_RANK = 8
_MAX_ELEMS = 1 << 33


def write_container(path, tensors: dict) -> None:
    """Write name->array mapping to `path` in container format."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.ndim > 0:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODE_FOR:
            arr = arr.astype(np.float32)
        code = _CODE_FOR[arr.dtype]
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())
    path.write_bytes(b"".join(chunks))


def read_container(path) -> dict:
    """Read a container; returns an ordered name->array dict."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) == 0:
        raise FormatError(f"{path}: empty file")
    view = memoryview(blob)
    pos = 0

    def need(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated at byte {pos} while reading {what}")
        piece = view[pos:pos + n]
        pos += n
        return piece

    if bytes(need(4, "magic")) != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0 (expected {MAGIC!r})")
    version, count = struct.unpack("<II", need(8, "header"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    tensors: dict = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", need(4, f"tensor {i} name length"))
        if name_len == 0 or name_len > _MAX_NAME:
            raise FormatError(f"{path}: implausible name length {name_len} at byte {pos - 4}")
        try:
            name = bytes(need(name_len, f"tensor {i} name")).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{path}: tensor {i} name is not UTF-8 at byte {pos - name_len}") from e
        code, rank = struct.unpack("<BB", need(2, f"{name}: dtype/rank"))
        if code not in _DTYPE_CODES:
            raise FormatError(f"{path}: {name}: unknown dtype code {code} at byte {pos - 2}")
        if rank > _MAX_RANK:
            raise FormatError(f"{path}: {name}: implausible rank {rank} at byte {pos - 1}")
        dims = struct.unpack(f"<{rank}Q", need(8 * rank, f"{name}: dims"))
        n = 1
        for d in dims:
            n *= d
        if n > _MAX_ELEMS:
            raise FormatError(f"{path}: {name}: implausible element count {n}")
        dtype = _DTYPE_CODES[code]
        raw = need(n * dtype.itemsize, f"{name}: data")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes after tensor {count - 1}")
    return tensors
