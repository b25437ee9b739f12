"""Binary framing shared by the edge daemon and the client.

Every frame (little-endian)::

    length      u32  bytes that follow this field (type + session + body)
    type        u8   1 HELLO, 2 JOB, 3 RESULT, 4 ERROR
    session_id  u64
    body

Bodies::

    HELLO   version u16, model digest 32s
    JOB     layer_index u32, kind u8 (1 conv, 2 fc), ndims u8, dims ndims*u32,
            elements prod(dims) * 24 bytes, unsigned
    RESULT  layer_index u32, kind u8, ndims u8, dims ndims*u32, compute_ns u64,
            elements prod(dims) * 32 bytes, two's complement
    ERROR   code u16, message_len u16, message utf-8

The client opens a session with HELLO; the edge answers with its own HELLO
when version and digest agree, otherwise with an ERROR.
"""

import struct
from dataclasses import dataclass

import numpy as np

from ..codec import bytes_to_ints, ints_to_bytes
from ..errors import ProtocolError
from ..model import DEC_ELEMENT_BYTES, ENC_ELEMENT_BYTES

PROTOCOL_VERSION = 1

HELLO, JOB, RESULT, ERROR = 1, 2, 3, 4
TYPE_NAMES = {HELLO: "HELLO", JOB: "JOB", RESULT: "RESULT", ERROR: "ERROR"}

KIND_CONV, KIND_FC = 1, 2
KIND_CODES = {"conv": KIND_CONV, "fc": KIND_FC}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

# error codes carried in ERROR frames
E_MALFORMED = 1
E_UNKNOWN_LAYER = 2
E_DIMENSION = 3
E_VERSION = 4
E_DIGEST = 5
E_UNKNOWN_TYPE = 6
E_NO_HELLO = 7
E_INTERNAL = 8
E_TOO_LARGE = 9

LENGTH = struct.Struct("<I")
HEADER = struct.Struct("<BQ")
_HELLO = struct.Struct("<H32s")
_ERROR = struct.Struct("<HH")
_JOB_HEAD = struct.Struct("<IBB")

MAX_FRAME = 64 * 1024 * 1024
MAX_DIMS = 3


def encode_frame(msg_type, session_id, body=b""):
    payload = HEADER.pack(msg_type, session_id) + body
    if len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds the {MAX_FRAME}-byte limit", E_TOO_LARGE)
    return LENGTH.pack(len(payload)) + payload


def decode_frame(frame):
    """Split a complete frame (with its length prefix) into ``(type, session_id, body)``."""
    if len(frame) < LENGTH.size + HEADER.size:
        raise ProtocolError("frame shorter than its header", E_MALFORMED)
    (length,) = LENGTH.unpack_from(frame)
    if length != len(frame) - LENGTH.size:
        raise ProtocolError(f"length field says {length} bytes, frame carries {len(frame) - LENGTH.size}",
                            E_MALFORMED)
    return decode_payload(frame[LENGTH.size:])


def decode_payload(payload):
    """Like decode_frame, for the bytes after the length prefix."""
    if len(payload) < HEADER.size:
        raise ProtocolError("frame shorter than its header", E_MALFORMED)
    msg_type, session_id = HEADER.unpack_from(payload)
    return msg_type, session_id, payload[HEADER.size:]


def session_of(payload):
    """Best-effort session id of a payload, 0 when it is too short to carry one."""
    if len(payload) >= HEADER.size:
        return HEADER.unpack_from(payload)[1]
    return 0


# ---------------------------------------------------------------- HELLO / ERROR

def hello_body(digest, version=PROTOCOL_VERSION):
    return _HELLO.pack(version, digest)


def parse_hello(body):
    if len(body) != _HELLO.size:
        raise ProtocolError(f"HELLO body is {len(body)} bytes, expected {_HELLO.size}", E_MALFORMED)
    return _HELLO.unpack(body)


def error_body(code, message):
    msg = message.encode("utf-8", "replace")[:1024]
    return _ERROR.pack(code, len(msg)) + msg


def parse_error(body):
    if len(body) < _ERROR.size:
        raise ProtocolError("ERROR body too short", E_MALFORMED)
    code, n = _ERROR.unpack_from(body)
    msg = body[_ERROR.size:]
    if len(msg) != n:
        raise ProtocolError("ERROR message length mismatch", E_MALFORMED)
    return code, msg.decode("utf-8", "replace")


# ---------------------------------------------------------------- JOB / RESULT

@dataclass
class OffloadJob:
    session_id: int
    layer_index: int
    kind: str
    elements: np.ndarray  # object array shaped like the layer input

    @property
    def dims(self):
        return self.elements.shape


@dataclass
class OffloadResult:
    session_id: int
    layer_index: int
    kind: str
    elements: np.ndarray
    compute_ns: int = 0

    @property
    def dims(self):
        return self.elements.shape


def _pack_head(layer_index, kind, dims):
    if kind not in KIND_CODES:
        raise ProtocolError(f"unknown layer kind {kind!r}", E_MALFORMED)
    if not 1 <= len(dims) <= MAX_DIMS:
        raise ProtocolError(f"{len(dims)} dimensions, expected 1..{MAX_DIMS}", E_MALFORMED)
    return _JOB_HEAD.pack(layer_index, KIND_CODES[kind], len(dims)) + struct.pack(f"<{len(dims)}I", *dims)


def _unpack_head(body):
    if len(body) < _JOB_HEAD.size:
        raise ProtocolError("body shorter than its layer header", E_MALFORMED)
    layer_index, kind, ndims = _JOB_HEAD.unpack_from(body)
    if kind not in KIND_NAMES:
        raise ProtocolError(f"unknown layer kind code {kind}", E_MALFORMED)
    if not 1 <= ndims <= MAX_DIMS:
        raise ProtocolError(f"{ndims} dimensions, expected 1..{MAX_DIMS}", E_MALFORMED)
    pos = _JOB_HEAD.size + 4 * ndims
    if len(body) < pos:
        raise ProtocolError("body shorter than its dimension list", E_MALFORMED)
    dims = struct.unpack_from(f"<{ndims}I", body, _JOB_HEAD.size)
    if 0 in dims:
        raise ProtocolError("zero-sized dimension", E_MALFORMED)
    return layer_index, KIND_NAMES[kind], dims, pos


def _elements(blob, dims, width):
    count = 1
    for d in dims:
        count *= d
    if len(blob) != count * width:
        raise ProtocolError(f"element blob is {len(blob)} bytes, dims {tuple(dims)} need {count * width}",
                            E_MALFORMED)
    return count


def encode_job(job):
    arr = np.asarray(job.elements, dtype=object)
    try:
        blob = ints_to_bytes(arr.reshape(-1), ENC_ELEMENT_BYTES)
    except OverflowError as exc:
        raise ProtocolError(f"masked input does not fit {ENC_ELEMENT_BYTES} bytes: {exc}", E_MALFORMED) from None
    return encode_frame(JOB, job.session_id, _pack_head(job.layer_index, job.kind, arr.shape) + blob)


def parse_job(session_id, body):
    layer_index, kind, dims, pos = _unpack_head(body)
    _elements(body[pos:], dims, ENC_ELEMENT_BYTES)
    values = bytes_to_ints(body[pos:], ENC_ELEMENT_BYTES).reshape(dims)
    return OffloadJob(session_id, layer_index, kind, values)


def encode_result(res):
    arr = np.asarray(res.elements, dtype=object)
    try:
        blob = ints_to_bytes(arr.reshape(-1), DEC_ELEMENT_BYTES, signed=True)
    except OverflowError as exc:
        raise ProtocolError(f"layer output does not fit {DEC_ELEMENT_BYTES} bytes: {exc}", E_INTERNAL) from None
    head = _pack_head(res.layer_index, res.kind, arr.shape) + struct.pack("<Q", res.compute_ns)
    return encode_frame(RESULT, res.session_id, head + blob)


def parse_result(session_id, body):
    layer_index, kind, dims, pos = _unpack_head(body)
    if len(body) < pos + 8:
        raise ProtocolError("RESULT body missing its timing field", E_MALFORMED)
    (compute_ns,) = struct.unpack_from("<Q", body, pos)
    blob = body[pos + 8:]
    _elements(blob, dims, DEC_ELEMENT_BYTES)
    values = bytes_to_ints(blob, DEC_ELEMENT_BYTES, signed=True).reshape(dims)
    return OffloadResult(session_id, layer_index, kind, values, compute_ns)


def job_payload_elements(frame):
    """Number of masked elements a JOB frame carries (for byte accounting)."""
    _, _, body = decode_frame(frame)
    _, _, dims, pos = _unpack_head(body)
    return (len(body) - pos) // ENC_ELEMENT_BYTES


def result_payload_elements(frame):
    _, _, body = decode_frame(frame)
    _, _, dims, pos = _unpack_head(body)
    return (len(body) - pos - 8) // DEC_ELEMENT_BYTES


# ---------------------------------------------------------------- blocking I/O

def recv_exact(sock, n):
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ConnectionError(f"connection closed with {remaining} of {n} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock):
    """Read one whole frame, length prefix included."""
    head = recv_exact(sock, LENGTH.size)
    (length,) = LENGTH.unpack(head)
    if length > MAX_FRAME:
        raise ProtocolError(f"peer announced a {length}-byte frame", E_TOO_LARGE)
    return head + recv_exact(sock, length)
