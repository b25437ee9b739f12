"""LEPK key files and replenishment batches.

Key file (little-endian)::

    magic        4s   b"LEPK"
    version      u16  1
    body_len     u64  bytes from request_id up to (not including) the digest
    request_id   16s
    gamma        u16
    lambda       u16
    scale_exp    i16
    weight_bits  u16
    offset       u8   1 if plaintexts are shifted by 2**(gamma-1) before masking
    pair_count   u32
    records, each:
      layer_index u32, kind u8 (1 conv, 2 fc)
      conv: n, D, k, H, s, p as 6*u32    fc: m, T as 2*u32
      enc elements, 24 bytes each, unsigned  (n*n*D or m of them)
      dec elements, 32 bytes each, two's complement  (o*o*H or T,
                   o = (n - k + 2p)/s + 1)
    digest       32s  SHA-256 of every preceding byte of this file

Element order is row-major height x width x depth, as in Tensor3.

A batch is zero or more key files back to back followed by a 32-byte
SHA-256 over all of them.
"""

import hashlib
import struct

from .codec import bytes_to_ints, ints_to_bytes
from .errors import KeyIntegrityError
from .fixedpoint import FpParams
from .masking import ConvKeyPair, FcKeyPair, KeySet
from .model import DEC_ELEMENT_BYTES, ENC_ELEMENT_BYTES
from .tensor import ConvSpec, FcSpec

MAGIC = b"LEPK"
VERSION = 1
_PREFIX = struct.Struct("<4sHQ")
_HEAD = struct.Struct("<16sHHhHBI")
DIGEST_BYTES = 32


def dump_keyset(ks):
    fp = ks.fp
    offset_flag = 0
    parts = []
    for idx in sorted(ks.pairs):
        pair = ks.pairs[idx]
        if pair.offset:
            if pair.offset != fp.offset:
                raise ValueError(f"layer {idx}: unsupported offset {pair.offset}")
            offset_flag = 1
        if isinstance(pair, ConvKeyPair):
            s = pair.spec
            rec = struct.pack("<IB6I", idx, 1, s.n, s.D, s.k, s.H, s.s, s.p)
            enc_vals, dec_vals = pair.enc.reshape(-1), pair.dec.reshape(-1)
        else:
            s = pair.spec
            rec = struct.pack("<IB2I", idx, 2, s.m, s.T)
            enc_vals, dec_vals = pair.enc, pair.dec
        parts.append(rec)
        parts.append(ints_to_bytes(enc_vals, ENC_ELEMENT_BYTES))
        parts.append(ints_to_bytes(dec_vals, DEC_ELEMENT_BYTES, signed=True))
    head = _HEAD.pack(ks.request_id, fp.gamma, fp.lam, fp.scale_exponent, fp.weight_bits,
                      offset_flag, len(ks.pairs))
    body = head + b"".join(parts)
    data = _PREFIX.pack(MAGIC, VERSION, len(body)) + body
    return data + hashlib.sha256(data).digest()


def _take(buf, pos, n):
    if pos + n > len(buf):
        raise KeyIntegrityError("key file truncated")
    return buf[pos:pos + n], pos + n


def parse_keyset(data, offset=0):
    """Parse one key file starting at ``offset``; returns ``(KeySet, end_offset)``."""
    prefix, pos = _take(data, offset, _PREFIX.size)
    magic, version, body_len = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise KeyIntegrityError("not an LEPK key file")
    if version != VERSION:
        raise KeyIntegrityError(f"unsupported key file version {version}")
    end = pos + body_len
    if end + DIGEST_BYTES > len(data):
        raise KeyIntegrityError("key file truncated")
    if hashlib.sha256(data[offset:end]).digest() != data[end:end + DIGEST_BYTES]:
        raise KeyIntegrityError("key file checksum mismatch")
    body = data[:end]
    head, pos = _take(body, pos, _HEAD.size)
    rid, gamma, lam, scale, wbits, offset_flag, count = _HEAD.unpack(head)
    fp = FpParams(gamma, lam, scale, wbits)
    shift = fp.offset if offset_flag else 0
    ks = KeySet(rid, fp)
    try:
        for _ in range(count):
            rec, pos = _take(body, pos, 5)
            idx, kind = struct.unpack("<IB", rec)
            if kind == 1:
                dims, pos = _take(body, pos, 24)
                spec = ConvSpec(*struct.unpack("<6I", dims))
                n, D, H, o = spec.n, spec.D, spec.H, spec.out_side
                n_enc, n_dec = n * n * D, o * o * H
            elif kind == 2:
                dims, pos = _take(body, pos, 8)
                m, T = struct.unpack("<2I", dims)
                spec = FcSpec(m, T)
                n_enc, n_dec = m, T
            else:
                raise KeyIntegrityError(f"unknown key record kind {kind}")
            blob, pos = _take(body, pos, n_enc * ENC_ELEMENT_BYTES)
            enc = bytes_to_ints(blob, ENC_ELEMENT_BYTES)
            blob, pos = _take(body, pos, n_dec * DEC_ELEMENT_BYTES)
            dec = bytes_to_ints(blob, DEC_ELEMENT_BYTES, signed=True)
            if kind == 1:
                ks.pairs[idx] = ConvKeyPair(spec, enc.reshape(n, n, D), dec.reshape(o, o, H), shift)
            else:
                ks.pairs[idx] = FcKeyPair(spec, enc, dec, shift)
    except (ValueError, TypeError, struct.error) as exc:
        raise KeyIntegrityError(f"malformed key record: {exc}") from None
    if pos != end:
        raise KeyIntegrityError("key file length disagrees with its records")
    return ks, end + DIGEST_BYTES


def load_keyset(data):
    ks, end = parse_keyset(data)
    if end != len(data):
        raise KeyIntegrityError("trailing bytes after key file")
    return ks


def peek_request_id(data, offset=0):
    """Request id of the key file at ``offset`` without decoding its elements."""
    prefix, pos = _take(data, offset, _PREFIX.size)
    if prefix[:4] != MAGIC:
        raise KeyIntegrityError("not an LEPK key file")
    rid, _ = _take(data, pos, 16)
    return rid


def split_batch(data):
    """Validate a batch checksum and return the raw key files it contains."""
    if len(data) < DIGEST_BYTES:
        raise KeyIntegrityError("batch shorter than its checksum")
    payload, digest = data[:-DIGEST_BYTES], data[-DIGEST_BYTES:]
    if hashlib.sha256(payload).digest() != digest:
        raise KeyIntegrityError("batch checksum mismatch")
    files = []
    pos = 0
    while pos < len(payload):
        prefix, _ = _take(payload, pos, _PREFIX.size)
        magic, _, body_len = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise KeyIntegrityError(f"batch entry at byte {pos} is not a key file")
        end = pos + _PREFIX.size + body_len + DIGEST_BYTES
        if end > len(payload):
            raise KeyIntegrityError("batch entry truncated")
        files.append(payload[pos:end])
        pos = end
    return files


def build_batch(key_files):
    payload = b"".join(key_files)
    return payload + hashlib.sha256(payload).digest()


def keyset_file_size(net):
    """Exact LEPK size in bytes for one key set of ``net``."""
    size = _PREFIX.size + _HEAD.size + DIGEST_BYTES
    for i in net.linear_indices():
        layer = net.layers[i]
        if isinstance(layer, ConvSpec):
            size += 29 + layer.in_size * ENC_ELEMENT_BYTES + layer.out_size * DEC_ELEMENT_BYTES
        else:
            size += 13 + layer.m * ENC_ELEMENT_BYTES + layer.T * DEC_ELEMENT_BYTES
    return size
