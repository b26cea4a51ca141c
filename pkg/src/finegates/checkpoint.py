"""Binary named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"FGCKPT01"
    u32 tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8 dtype code (0 = float64, 1 = uint8 metadata blob)
        u8 rank, rank x u32 dims
        raw little-endian data

Run metadata (configs, metrics tail) travels as uint8 tensors named
``meta/<key>`` holding sorted-key JSON, so that a checkpoint is one file.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"FGCKPT01"
DTYPE_F64 = 0
DTYPE_U8 = 1
_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_U8: np.dtype("u1")}
META_PREFIX = "meta/"


@dataclass
class Checkpoint:
    tensors: dict
    meta: dict = field(default_factory=dict)

    @property
    def model_config(self):
        return self.meta.get("model_config", {})

    @property
    def train_config(self):
        return self.meta.get("train_config", {})


def encode(tensors, meta=None):
    entries = [(name, np.asarray(arr, dtype="<f8"), DTYPE_F64) for name, arr in tensors.items()]
    for key in sorted(meta or {}):
        blob = json.dumps(meta[key], sort_keys=True, separators=(",", ":")).encode("utf-8")
        entries.append((META_PREFIX + key, np.frombuffer(blob, dtype="u1"), DTYPE_U8))

    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr, code in entries:
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255 or any(n > 0xFFFFFFFF for n in arr.shape):
            raise FormatError(f"tensor {name!r} shape {arr.shape} not representable")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf):
    buf = memoryview(buf)
    pos = 0

    def need(n, what):
        if pos + n > len(buf):
            raise FormatError(f"truncated file while reading {what}", pos)

    need(len(MAGIC), "magic")
    if bytes(buf[: len(MAGIC)]) != MAGIC:
        raise FormatError("bad magic, not a FineGates checkpoint", 0)
    pos = len(MAGIC)
    need(4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4

    tensors, meta = {}, {}
    for _ in range(count):
        start = pos
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen, "tensor name")
        try:
            name = bytes(buf[pos : pos + nlen]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", pos) from None
        pos += nlen
        need(2, "dtype and rank")
        code, rank = struct.unpack_from("<BB", buf, pos)
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}", pos)
        pos += 2
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        dtype = _DTYPES[code]
        nbytes = dtype.itemsize * int(np.prod(dims, dtype=object))
        if nbytes > len(buf) - pos:
            raise FormatError(
                f"tensor {name!r} with dims {dims} needs {nbytes} bytes, only {len(buf) - pos} remain",
                pos,
            )
        arr = np.frombuffer(buf[pos : pos + nbytes], dtype=dtype).reshape(dims).copy()
        pos += nbytes
        if name in tensors or name[len(META_PREFIX):] in meta:
            raise FormatError(f"duplicate tensor name {name!r}", start)
        if code == DTYPE_U8:
            if not name.startswith(META_PREFIX):
                raise FormatError(f"byte tensor {name!r} outside the meta/ namespace", start)
            try:
                meta[name[len(META_PREFIX):]] = json.loads(arr.tobytes().decode("utf-8"))
            except ValueError:
                raise FormatError(f"metadata {name!r} is not valid JSON", start) from None
        else:
            tensors[name] = arr.astype(np.float64)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos)
    return Checkpoint(tensors, meta)


def save_checkpoint(path, tensors, meta=None):
    data = encode(tensors, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
