"""Binary tensor records ("DSRT v1") and named-record container files.

Record layout: magic ``DSRT``, one dtype byte (0=float32, 1=uint8,
2=float64), one rank byte, rank little-endian u32 extents, then the
row-major little-endian payload. Checkpoints are a flat sequence of
(u32 name length, utf-8 name, DSRT record).
"""
from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"DSRT"

_DTYPE_TO_CODE = {
    np.dtype("<f4"): 0,
    np.dtype("|u1"): 1,
    np.dtype("<f8"): 2,
}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("|u1"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """Raised on malformed tensor or checkpoint files."""


def _as_array(t):
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def write_tensor_record(fh, t):
    arr = _as_array(t)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in _DTYPE_TO_CODE:
        raise FormatError(f"unsupported dtype {arr.dtype} for DSRT record")
    if arr.ndim > 255:
        raise FormatError("rank exceeds one byte")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", _DTYPE_TO_CODE[dt], arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.astype(dt, copy=False).tobytes(order="C"))


def read_tensor_record(fh):
    offset = fh.tell()
    head = fh.read(6)
    if len(head) < 6 or head[:4] != MAGIC:
        raise FormatError(f"bad or truncated DSRT header at offset {offset}")
    code, rank = head[4], head[5]
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code} at offset {offset}")
    ext_bytes = fh.read(4 * rank)
    if len(ext_bytes) < 4 * rank:
        raise FormatError(f"truncated extents at offset {offset}")
    shape = struct.unpack(f"<{rank}I", ext_bytes) if rank else ()
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        raise FormatError(f"truncated payload at offset {offset}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_tensor(path, t):
    with open(path, "wb") as fh:
        write_tensor_record(fh, t)


def load_tensor(path):
    with open(path, "rb") as fh:
        arr = read_tensor_record(fh)
        if fh.read(1):
            raise FormatError(f"trailing bytes after record in {path}")
    return arr


def save_records(path, named):
    """Write an ordered mapping of name -> tensor/array as one container file."""
    with open(path, "wb") as fh:
        for name, t in named.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            write_tensor_record(fh, t)


def load_records(path):
    out = {}
    with open(path, "rb") as fh:
        while True:
            offset = fh.tell()
            head = fh.read(4)
            if not head:
                break
            if len(head) < 4:
                raise FormatError(f"truncated name length at offset {offset}")
            (nlen,) = struct.unpack("<I", head)
            nb = fh.read(nlen)
            if len(nb) < nlen:
                raise FormatError(f"truncated name at offset {offset}")
            name = nb.decode("utf-8")
            if name in out:
                raise FormatError(f"duplicate record name {name!r} at offset {offset}")
            out[name] = read_tensor_record(fh)
    return out


# ---------------------------------------------------------------------------
# flat key = value text files (manifests and configs)


def write_kv(path, mapping, header=None):
    lines = []
    if header:
        lines.append(f"# {header}")
    for key, value in mapping.items():
        lines.append(f"{key} = {value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_kv(path):
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
