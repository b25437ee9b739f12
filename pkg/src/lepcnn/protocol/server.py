"""Edge daemon: evaluates offloaded conv/fc layers on masked inputs.

``EdgeCore`` is the transport-free part (one frame in, one frame out) and
is what the fuzz tests drive directly.  ``EdgeServer`` puts it behind an
asyncio TCP listener: each connection is handled in order, layer work is
pushed to a thread pool so distinct connections proceed concurrently.
"""

import asyncio
import logging
import random
import threading
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor

from ..errors import ProtocolError
from ..integrity import corrupt
from ..masking import edge_eval
from ..model import model_digest, validate_model
from ..tensor import ConvSpec, FcSpec, Tensor3
from . import wire

log = logging.getLogger(__name__)

MAX_SESSIONS = 65536


class EdgeCore:
    def __init__(self, net, params, adversary=None, rng=None, digest=None, report_timing=True):
        validate_model(net, params)
        self.report_timing = report_timing
        self.net = net
        self.params = params
        self.digest = digest or model_digest(net, params)
        self.adversary = adversary
        self.rng = rng or random.SystemRandom()
        self._sessions = OrderedDict()
        self._lock = threading.Lock()
        self.jobs_served = 0

    # ------------------------------------------------------------ sessions

    def _open_session(self, session_id):
        with self._lock:
            self._sessions[session_id] = True
            self._sessions.move_to_end(session_id)
            while len(self._sessions) > MAX_SESSIONS:
                self._sessions.popitem(last=False)

    def _has_session(self, session_id):
        with self._lock:
            return session_id in self._sessions

    # ------------------------------------------------------------ frames

    def handle_frame(self, frame):
        """Reply frame for one complete request frame (length prefix included)."""
        if len(frame) < wire.LENGTH.size:
            return _error(0, wire.E_MALFORMED, "frame shorter than its length field")
        (length,) = wire.LENGTH.unpack_from(frame)
        payload = frame[wire.LENGTH.size:]
        if length != len(payload):
            return _error(wire.session_of(payload), wire.E_MALFORMED,
                          f"length field says {length} bytes, frame carries {len(payload)}")
        return self.handle_payload(payload)

    def handle_payload(self, payload):
        session_id = wire.session_of(payload)
        try:
            msg_type, session_id, body = wire.decode_payload(payload)
            if msg_type == wire.HELLO:
                return self._hello(session_id, body)
            if msg_type == wire.JOB:
                return self._job(session_id, body)
            if msg_type in (wire.RESULT, wire.ERROR):
                raise ProtocolError(f"clients may not send {wire.TYPE_NAMES[msg_type]} frames",
                                    wire.E_UNKNOWN_TYPE)
            raise ProtocolError(f"unknown message type {msg_type}", wire.E_UNKNOWN_TYPE)
        except ProtocolError as exc:
            return _error(session_id, exc.code or wire.E_MALFORMED, str(exc))
        except Exception as exc:  # never let one request take the daemon down
            log.exception("internal error on session %x", session_id)
            return _error(session_id, wire.E_INTERNAL, f"{type(exc).__name__}: {exc}")

    def _hello(self, session_id, body):
        version, digest = wire.parse_hello(body)
        if version != wire.PROTOCOL_VERSION:
            raise ProtocolError(f"protocol version {version} not supported (edge speaks "
                                f"{wire.PROTOCOL_VERSION})", wire.E_VERSION)
        if digest != self.digest:
            raise ProtocolError(f"model digest {digest.hex()[:16]}... does not match the edge's "
                                f"{self.digest.hex()[:16]}...", wire.E_DIGEST)
        self._open_session(session_id)
        return wire.encode_frame(wire.HELLO, session_id, wire.hello_body(self.digest))

    def _job(self, session_id, body):
        if not self._has_session(session_id):
            raise ProtocolError(f"session {session_id:x} has not sent HELLO", wire.E_NO_HELLO)
        job = wire.parse_job(session_id, body)
        idx = job.layer_index
        if idx >= len(self.net.layers) or not isinstance(self.net.layers[idx], (ConvSpec, FcSpec)):
            raise ProtocolError(f"layer {idx} is not an offloadable layer of this model", wire.E_UNKNOWN_LAYER)
        spec = self.net.layers[idx]
        expected_kind = "conv" if isinstance(spec, ConvSpec) else "fc"
        if job.kind != expected_kind:
            raise ProtocolError(f"layer {idx} is {expected_kind}, job says {job.kind}", wire.E_DIMENSION)
        if tuple(job.dims) != tuple(spec.in_shape):
            raise ProtocolError(f"layer {idx} expects input {spec.in_shape}, job carries {job.dims}",
                                wire.E_DIMENSION)
        t0 = time.perf_counter_ns()
        x = Tensor3(job.elements) if expected_kind == "conv" else job.elements
        out = edge_eval(x, spec, self.params[idx])
        if self.adversary is not None:
            out = corrupt(out, self.adversary, self.rng, lam=self.net.fp.lam)
        elapsed = time.perf_counter_ns() - t0 if self.report_timing else 0
        arr = out.array if isinstance(out, Tensor3) else out
        self.jobs_served += 1
        return wire.encode_result(wire.OffloadResult(session_id, idx, job.kind, arr, elapsed))


def _error(session_id, code, message):
    return wire.encode_frame(wire.ERROR, session_id, wire.error_body(code, message))


class EdgeServer:
    """asyncio TCP front end for an EdgeCore."""

    def __init__(self, core, host="127.0.0.1", port=0, read_timeout=60.0, workers=4):
        self.core = core
        self.host = host
        self.port = port
        self.read_timeout = read_timeout
        self._executor = ThreadPoolExecutor(max_workers=workers)
        self._server = None
        self._loop = None
        self._thread = None

    @property
    def address(self):
        return self._server.sockets[0].getsockname()[:2]

    async def _reply(self, writer, frame):
        writer.write(frame)
        await writer.drain()

    async def _connection(self, reader, writer):
        loop = asyncio.get_running_loop()
        peer = writer.get_extra_info("peername")
        try:
            while True:
                try:
                    head = await reader.readexactly(wire.LENGTH.size)
                except asyncio.IncompleteReadError as exc:
                    if exc.partial:
                        await self._reply(writer, _error(0, wire.E_MALFORMED, "truncated length field"))
                    break
                (length,) = wire.LENGTH.unpack(head)
                if length > wire.MAX_FRAME:
                    # the stream cannot be resynchronised past an absurd length
                    await self._reply(writer, _error(0, wire.E_TOO_LARGE,
                                                     f"frame of {length} bytes exceeds {wire.MAX_FRAME}"))
                    break
                try:
                    payload = await asyncio.wait_for(reader.readexactly(length), self.read_timeout)
                except asyncio.IncompleteReadError as exc:
                    await self._reply(writer, _error(wire.session_of(exc.partial), wire.E_MALFORMED,
                                                     f"frame truncated: {len(exc.partial)} of {length} bytes"))
                    break
                except asyncio.TimeoutError:
                    await self._reply(writer, _error(0, wire.E_MALFORMED, "timed out inside a frame"))
                    break
                reply = await loop.run_in_executor(self._executor, self.core.handle_payload, payload)
                await self._reply(writer, reply)
        except (ConnectionError, OSError) as exc:
            log.info("connection from %s dropped: %s", peer, exc)
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def start(self):
        self._server = await asyncio.start_server(self._connection, self.host, self.port)
        log.info("edge listening on %s:%d", *self.address)
        return self

    async def serve_forever(self):
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    # ------------------------------------------------------------ thread helpers

    def start_in_thread(self):
        """Run the listener on a private event loop in a daemon thread (tests, simulate)."""
        ready = threading.Event()

        def run():
            self._loop = asyncio.new_event_loop()
            asyncio.set_event_loop(self._loop)
            self._loop.run_until_complete(self.start())
            ready.set()
            self._loop.run_forever()

        self._thread = threading.Thread(target=run, name="lepcnn-edge", daemon=True)
        self._thread.start()
        ready.wait(10)
        return self

    def stop(self):
        if self._loop is None:
            return

        async def shutdown():
            self._server.close()
            await self._server.wait_closed()
            # drop open connections before the loop goes away
            tasks = [t for t in asyncio.all_tasks() if t is not asyncio.current_task()]
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)

        asyncio.run_coroutine_threadsafe(shutdown(), self._loop).result(10)
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(10)
        self._loop.close()
        self._executor.shutdown(wait=False)
        self._loop = None

    def __enter__(self):
        return self.start_in_thread()

    def __exit__(self, *exc):
        self.stop()
