"""Fixed-width little-endian encoding of big-integer arrays."""

import numpy as np

from .exact import as_object

_M64 = (1 << 64) - 1


def ints_to_bytes(values, width, signed=False):
    """Pack ints into ``width``-byte little-endian slots (two's complement if signed)."""
    if width % 8:
        raise ValueError("width must be a multiple of 8 bytes")
    arr = np.asarray(values, dtype=object) if isinstance(values, (list, tuple)) else np.asarray(values)
    if arr.size == 0:
        return b""
    arr = as_object(arr).reshape(-1)
    bits = 8 * width
    lo, hi = int(arr.min()), int(arr.max())
    if signed:
        if lo < -(1 << (bits - 1)) or hi >= 1 << (bits - 1):
            raise OverflowError(f"value outside signed {bits}-bit range")
        arr = arr % (1 << bits)
    elif lo < 0 or hi >= 1 << bits:
        raise OverflowError(f"value outside unsigned {bits}-bit range")
    nw = width // 8
    words = np.empty((arr.size, nw), dtype="<u8")
    for i in range(nw):
        words[:, i] = ((arr >> (64 * i)) & _M64).astype(np.uint64)
    return words.tobytes()


def bytes_to_ints(buf, width, signed=False):
    """Inverse of :func:`ints_to_bytes`; returns a 1-D object array."""
    if width % 8:
        raise ValueError("width must be a multiple of 8 bytes")
    if len(buf) % width:
        raise ValueError(f"{len(buf)} bytes is not a whole number of {width}-byte elements")
    nw = width // 8
    words = np.frombuffer(buf, dtype="<u8").reshape(-1, nw)
    out = words[:, 0].astype(object)
    for i in range(1, nw):
        out = out + (words[:, i].astype(object) << (64 * i))
    if signed and out.size:
        bits = 8 * width
        out = np.where(out >= 1 << (bits - 1), out - (1 << bits), out).astype(object)
    return out
