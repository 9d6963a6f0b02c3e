"""Versioned little-endian container for checkpoints and deployed models.

Layout::

    magic   b"EDGN"
    u16     format version
    u8      kind (0 = checkpoint, 1 = deployed)
    u32     metadata length, then UTF-8 JSON metadata (sorted keys)
    u32     record count, then per record:
              u16 name length, UTF-8 name
              u8  dtype tag (0 f64, 1 f32, 2 f16, 3 i8)
              u8  rank, then u32 extent per dimension
              [i8 only] f32 scale, i32 zero point
              raw element payload, row-major, little-endian
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .tensor import QuantParams, Tensor

MAGIC = b"EDGN"
VERSION = 1
KIND_CHECKPOINT = 0
KIND_DEPLOYED = 1

_TAGS = {"f64": 0, "f32": 1, "f16": 2, "i8": 3}
_TAG_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<f2"), 3: np.dtype("i1")}


def header_size(meta: dict) -> int:
    return 4 + 2 + 1 + 4 + len(_encode_meta(meta)) + 4


def record_size(name: str, tensor: Tensor) -> int:
    extra = 8 if tensor.quant is not None else 0
    return 2 + len(name.encode()) + 2 + 4 * len(tensor.shape) + extra + tensor.nbytes


def _encode_meta(meta):
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def encode(kind: int, meta: dict, records: dict) -> bytes:
    parts = [MAGIC, struct.pack("<HB", VERSION, kind)]
    blob = _encode_meta(meta)
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(records))]
    for name, t in records.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAGS[t.dtype], t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        if t.quant is not None:
            parts.append(struct.pack("<fi", t.quant.scale, t.quant.zero_point))
        parts.append(np.ascontiguousarray(t.data, dtype=_TAG_DTYPES[_TAGS[t.dtype]]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes):
    """Parse a container; returns ``(kind, meta, records)``."""
    r = _Reader(buf)
    if bytes(r.take(4, "magic")) != MAGIC:
        raise FormatError("bad magic, not an EDGN model file", 0)
    version, kind = r.unpack("<HB", "header")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    if kind not in (KIND_CHECKPOINT, KIND_DEPLOYED):
        raise FormatError(f"unknown artifact kind {kind}", 6)
    (meta_len,) = r.unpack("<I", "metadata length")
    start = r.pos
    try:
        meta = json.loads(bytes(r.take(meta_len, "metadata")).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata: {exc}", start) from None
    (count,) = r.unpack("<I", "record count")
    records = {}
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<H", "record name length")
        name = bytes(r.take(name_len, "record name")).decode()
        tag, ndim = r.unpack("<BB", f"record '{name}' header")
        if tag not in _TAG_DTYPES:
            raise FormatError(f"record '{name}' has unknown dtype tag {tag}", at)
        dims = r.unpack(f"<{ndim}I", f"record '{name}' shape")
        quant = None
        if tag == _TAGS["i8"]:
            scale, zp = r.unpack("<fi", f"record '{name}' quantization")
            try:
                quant = QuantParams(scale, zp)
            except ValueError as exc:
                raise FormatError(f"record '{name}': {exc}", at) from None
        dt = _TAG_DTYPES[tag]
        n = int(np.prod(dims)) * dt.itemsize
        data = np.frombuffer(r.take(n, f"record '{name}' payload"), dtype=dt).reshape(dims)
        records[name] = Tensor(data.astype(dt.newbyteorder("="), copy=True), quant)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last record", r.pos)
    return kind, meta, records


def atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_file(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
