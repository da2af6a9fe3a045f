"""Reader/writer for the ``TNSR`` named-tensor container.

Layout (all integers little-endian)::

    b"TNSR" | u32 version=1 | u32 count |
    count x ( u16 name_len | name utf-8 | u8 ndim | ndim x u32 dim | u8 dtype | payload )

dtype 0 is float32; the payload is row-major.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"TNSR"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
_CODES = {v: k for k, v in DTYPES.items()}


def dumps(entries):
    """Serialise a mapping of name -> array to bytes (arrays stored as float32)."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"entry name too long: {name[:32]}...")
        if arr.ndim > 255:
            raise FormatError("too many dimensions")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<B", _CODES[arr.dtype]))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf):
    """Parse bytes produced by :func:`dumps` into an ordered dict of arrays."""
    view = memoryview(buf)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("bad magic, not a TNSR file")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise FormatError(f"unsupported TNSR version {version}")
        pos = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            (code,) = struct.unpack_from("<B", view, pos)
            pos += 1
            if code not in DTYPES:
                raise FormatError(f"unknown dtype code {code} for entry {name!r}")
            dt = DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(view):
                raise FormatError(f"truncated payload for entry {name!r}")
            arr = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(dims)
            out[name] = arr.astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated TNSR header: {exc}") from None
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save(path, entries):
    with open(path, "wb") as fh:
        fh.write(dumps(entries))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
