"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RFNN" | version u32 | count u32 |
    count x ( name_len u16 | name utf-8 | dtype u8 | rank u8 | dims u32[rank] | values )

dtype 0 is float32 and 1 is float64.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autograd import Parameter
from .errors import FormatError
from .networks import ModelWeights

MAGIC = b"RFNN"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode_checkpoint(w: ModelWeights, dtype="float32") -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(w))]
    for name, p in w.params.items():
        arr = p.data if dtype is None else p.data.astype(dtype)
        code = CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(chunks)


def decode_checkpoint(buf: bytes) -> ModelWeights:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes for {what} at offset {pos}, file has {len(buf)}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes: not an RFNN checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    w = ModelWeights()
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"parameter name is not valid UTF-8 near offset {pos}") from None
        code, rank = struct.unpack("<BB", take(2, f"dtype/rank of {name}"))
        if code not in DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name} at offset {pos - 2}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        dt = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(size * dt.itemsize, f"values of {name}"), dtype=dt).reshape(dims)
        if name in w:
            raise FormatError(f"duplicate parameter {name}")
        w.params[name] = Parameter(name, data.astype(dt.newbyteorder("=")))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after offset {pos}")
    return w


def save_checkpoint(w: ModelWeights, path: str | Path, dtype="float32") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(w, dtype))
    return path


def load_checkpoint(path: str | Path) -> ModelWeights:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    return decode_checkpoint(buf)


def expected_size(w: ModelWeights, itemsize: int = 4) -> int:
    total = 12
    for name, p in w.params.items():
        total += 2 + len(name.encode("utf-8")) + 2 + 4 * p.data.ndim + itemsize * p.data.size
    return total
