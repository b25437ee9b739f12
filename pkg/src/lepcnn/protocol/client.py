"""Client side: one session with an edge, and the offloaded inference loop."""

import logging
import secrets
import socket

import numpy as np

from ..errors import AuditFailure, KeyIntegrityError, ProtocolError
from ..fixedpoint import check_plain_range
from ..integrity import AuditReport, LayerAuditor, make_plan, rates_by_layer
from ..masking import KeySet, decrypt, encrypt
from ..model import model_digest
from ..tensor import ConvSpec, FcSpec, Tensor3, apply_local, flatten
from . import wire

log = logging.getLogger(__name__)


def parse_endpoint(text, default_port=7450):
    """``host:port`` (or ``[v6]:port``) -> (host, port)."""
    if isinstance(text, tuple):
        return text
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    return host.strip("[]"), int(port)


class EdgeClient:
    """A single session: HELLO once, then one job in flight at a time.

    ``tap(direction, frame)`` sees every frame sent ("out") and received
    ("in").  A network failure during a job triggers ``retries`` reconnects
    that resend the same job; results are deterministic, so this is safe.
    """

    def __init__(self, endpoint, digest, session_id=None, timeout=120.0, tap=None, retries=1):
        self.endpoint = parse_endpoint(endpoint)
        self.digest = digest
        self.session_id = secrets.randbits(64) if session_id is None else session_id
        self.timeout = timeout
        self.tap = tap
        self.retries = retries
        self._sock = None

    def _send(self, frame):
        if self.tap:
            self.tap("out", frame)
        self._sock.sendall(frame)

    def _recv(self):
        frame = wire.recv_frame(self._sock)
        if self.tap:
            self.tap("in", frame)
        return frame

    def _expect(self, frame, msg_type):
        got, sid, body = wire.decode_frame(frame)
        if got == wire.ERROR:
            code, message = wire.parse_error(body)
            raise ProtocolError(f"edge error {code}: {message}", code)
        if got != msg_type:
            raise ProtocolError(f"expected {wire.TYPE_NAMES[msg_type]}, got type {got}", wire.E_UNKNOWN_TYPE)
        if sid != self.session_id:
            raise ProtocolError(f"reply for session {sid:x}, this is {self.session_id:x}", wire.E_MALFORMED)
        return body

    def connect(self):
        self.close()
        self._sock = socket.create_connection(self.endpoint, timeout=self.timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send(wire.encode_frame(wire.HELLO, self.session_id, wire.hello_body(self.digest)))
        version, digest = wire.parse_hello(self._expect(self._recv(), wire.HELLO))
        if digest != self.digest:
            raise ProtocolError("edge answered HELLO with a different model digest", wire.E_DIGEST)
        return self

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    def run_job(self, layer_index, kind, masked):
        """Send one masked layer input, return the OffloadResult."""
        arr = masked.array if isinstance(masked, Tensor3) else np.asarray(masked, dtype=object)
        frame = wire.encode_job(wire.OffloadJob(self.session_id, layer_index, kind, arr))
        for attempt in range(self.retries + 1):
            try:
                if self._sock is None:
                    self.connect()
                self._send(frame)
                reply = self._recv()
                break
            except (ConnectionError, socket.timeout, OSError) as exc:
                self.close()
                if attempt == self.retries:
                    raise
                log.warning("job for layer %d failed (%s); retrying", layer_index, exc)
        res = wire.parse_result(self.session_id, self._expect(reply, wire.RESULT))
        if res.layer_index != layer_index or res.kind != kind:
            raise ProtocolError(f"result for layer {res.layer_index}, asked for {layer_index}", wire.E_MALFORMED)
        return res


def _check_keyset(ks, net):
    if ks.fp != net.fp:
        raise KeyIntegrityError(f"key set {ks.hex_id} was made for {ks.fp}, model uses {net.fp}")
    for i in net.linear_indices():
        pair = ks.pairs.get(i)
        if pair is None or pair.spec != net.layers[i]:
            raise KeyIntegrityError(f"key set {ks.hex_id} has no matching key for layer {i}")


def infer_offloaded(x, net, params, keys, endpoint=None, audit=None, rng=None, client=None,
                    digest=None, tap=None):
    """Run ``net`` on ``x`` with every conv/fc layer evaluated by the edge.

    ``keys`` is a KeyStore (one key set is claimed before anything is sent)
    or an already claimed KeySet.  ``audit`` selects sample rates, see
    ``integrity.rates_by_layer``; ``rng`` (a random.Random) drives the
    sample positions.  Returns ``(output_vector, AuditReport)``.  A failed
    audit raises AuditFailure naming the layer; the inference is abandoned.
    """
    rates = rates_by_layer(net, audit)
    ks = keys if isinstance(keys, KeySet) else keys.claim_keyset()
    _check_keyset(ks, net)
    own_client = client is None
    if own_client:
        client = EdgeClient(endpoint, digest or model_digest(net, params), tap=tap)
    report = AuditReport()
    fp = net.fp
    m = x if isinstance(x, Tensor3) or np.ndim(x) != 3 else Tensor3(x)
    try:
        for i, layer in enumerate(net.layers):
            if not isinstance(layer, (ConvSpec, FcSpec)):
                m = apply_local(layer, m)
                continue
            if isinstance(layer, FcSpec) and isinstance(m, Tensor3):
                m = flatten(m)
            pair = ks.pair_for(i)
            check_plain_range(m.array if isinstance(m, Tensor3) else m, fp, f"input of layer {i}")
            masked = encrypt(m, pair)
            res = client.run_job(i, pair.kind, masked)
            out = Tensor3(res.elements) if pair.kind == "conv" else res.elements
            if i in rates:
                plan = make_plan(layer.out_size, rates[i], rng)
                result = LayerAuditor(masked, layer, params[i]).audit(out, plan, i)
                report.layers.append(result)
                if not result.passed:
                    raise AuditFailure(i, result.failed_position)
            m = decrypt(out, pair)
    finally:
        ks.consumed = True
        if own_client:
            client.close()
    return (flatten(m) if isinstance(m, Tensor3) else m), report
