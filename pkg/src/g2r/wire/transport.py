"""Stream transport for the wire protocol: TCP sockets or in-process socket pairs.

Endpoints are ``inproc://<name>``, ``tcp://host:port`` or bare ``host:port``.
"""

from __future__ import annotations

import json
import logging
import random
import selectors
import socket
import threading
import time
from collections import defaultdict, deque
from typing import Callable, Iterable

from g2r.core import GBufferId
from g2r.errors import G2RError
from g2r.wire.codec import (
    Kind,
    Message,
    Sensor,
    TruncatedPayload,
    WireError,
    decode_message,
    encode_message,
)

log = logging.getLogger(__name__)

_RECV_CHUNK = 1 << 18


class ConnectionRefused(G2RError):
    pass


class ConnectionClosed(G2RError):
    pass


class ProtocolViolation(G2RError):
    pass


class WireTimeout(G2RError):
    pass


# -- stream naming -------------------------------------------------------------

StreamKey = tuple  # (Sensor, GBufferId | None)


def stream_key(name: str) -> StreamKey:
    """``"rgb"`` -> (Rgb, None); ``"gbuffer:Depth"`` -> (GBuffer, Depth)."""
    name = name.strip()
    if name.lower().startswith("gbuffer:"):
        return Sensor.GBuffer, GBufferId[name.split(":", 1)[1]]
    lookup = {s.name.lower(): s for s in Sensor}
    lookup["vehicle_status"] = Sensor.VehicleStatus
    try:
        sensor = lookup[name.lower()]
    except KeyError:
        raise ValueError(f"unknown stream {name!r}") from None
    if sensor == Sensor.GBuffer:
        raise ValueError("G-buffer streams must name a buffer, e.g. 'gbuffer:Depth'")
    return sensor, None


def stream_name(key: StreamKey) -> str:
    sensor, gbuffer_id = key
    if sensor == Sensor.GBuffer:
        return f"gbuffer:{gbuffer_id.name}"
    if sensor == Sensor.VehicleStatus:
        return "vehicle_status"
    return sensor.name.lower()


# -- connection ----------------------------------------------------------------


class Connection:
    """Message-level wrapper over a stream socket.

    A framing error other than truncation closes the connection: the stream
    position can no longer be trusted and resyncing would risk mixing frames.
    """

    def __init__(self, sock: socket.socket):
        # stays blocking: timeouts go through the selector, since settimeout() from the
        # reading thread would flip the mode under a concurrent sendall()
        sock.settimeout(None)
        self.sock = sock
        self._selector = selectors.DefaultSelector()
        self._selector.register(sock, selectors.EVENT_READ)
        self._buf = bytearray()
        self._eof = False
        self._closed = False
        self._send_lock = threading.Lock()

    def send(self, msg: Message):
        data = encode_message(msg)
        with self._send_lock:
            if self._closed:
                raise ConnectionClosed("send on closed connection")
            try:
                self.sock.sendall(data)
            except OSError as exc:
                self._closed = True
                raise ConnectionClosed(str(exc)) from None

    def send_raw(self, data: bytes):
        with self._send_lock:
            self.sock.sendall(data)

    def recv(self, timeout: float | None = None, deadline: float | None = None) -> Message:
        """Next message. ``deadline`` is an absolute ``time.monotonic()`` bound."""
        while True:
            if self._closed and not self._buf:
                raise ConnectionClosed("connection closed")
            try:
                msg, used = decode_message(self._buf)
            except TruncatedPayload:
                if self._eof:
                    partial = len(self._buf)
                    self._buf.clear()
                    self._closed = True
                    if partial:
                        raise
                    raise ConnectionClosed("peer closed the connection") from None
                wait = timeout
                if deadline is not None:
                    wait = max(0.0, deadline - time.monotonic())
                    if timeout is not None:
                        wait = min(wait, timeout)
                    if wait == 0.0:
                        raise WireTimeout("deadline passed") from None
                self._fill(wait)
                continue
            except WireError:
                self._buf.clear()
                self.close()
                raise
            del self._buf[:used]
            return msg

    def _fill(self, timeout):
        try:
            ready = self._selector.select(timeout)
        except (OSError, ValueError):  # closed underneath us
            ready, self._eof = [], True
        if not ready and not self._eof:
            raise WireTimeout(f"no data within {timeout}s")
        try:
            data = b"" if self._eof else self.sock.recv(_RECV_CHUNK)
        except OSError:
            data = b""
        if not data:
            self._eof = True
        else:
            self._buf += data

    def shutdown(self):
        """Wake any thread blocked in ``recv`` without freeing the descriptor."""
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass

    def close(self):
        if self._closed and self.sock.fileno() < 0:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._selector.close()
        except (OSError, ValueError, KeyError):
            pass
        self.sock.close()

    @property
    def closed(self) -> bool:
        return self._closed


# -- server ----------------------------------------------------------------------

EngineCallback = Callable[[frozenset], tuple]
"""``callback(subscribed_keys) -> (frame_id, [SensorData messages])``; advances the engine one tick."""


class Jitter:
    """Seeded per-stream delivery delay, in whole frames, for fault-injection runs."""

    def __init__(self, max_delay: dict | int, seed: int = 0):
        self.max_delay = max_delay
        self._rng = random.Random(seed)

    def delay(self, key: StreamKey) -> int:
        limit = self.max_delay if isinstance(self.max_delay, int) else self.max_delay.get(key, 0)
        return self._rng.randint(0, limit) if limit else 0


class Server:
    def __init__(
        self,
        engine_callback: EngineCallback,
        endpoint: str,
        mode: str = "sync",
        *,
        info: dict | None = None,
        on_control: Callable[[dict], None] | None = None,
        period: float = 0.0,
        max_frames: int | None = None,
        stream_delays: dict | None = None,
        jitter: Jitter | None = None,
        cut_at_frame: int | None = None,
    ):
        if mode not in ("sync", "async"):
            raise ValueError(f"mode must be 'sync' or 'async', got {mode!r}")
        self.engine_callback = engine_callback
        self.endpoint = endpoint
        self.mode = mode
        self.info = dict(info or {})
        self.on_control = on_control
        self.period = period
        self.max_frames = max_frames
        self.stream_delays = dict(stream_delays or {})
        self.jitter = jitter
        self.cut_at_frame = cut_at_frame
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._conns: list[Connection] = []
        self._listener = None
        self._engine_lock = threading.Lock()
        self.errors: list[BaseException] = []

    # lifecycle
    def start(self) -> "Server":
        if self.endpoint.startswith("inproc://"):
            name = self.endpoint[len("inproc://") :]
            with _INPROC_LOCK:
                if name in _INPROC:
                    raise G2RError(f"in-process endpoint {name!r} already bound")
                _INPROC[name] = self
        else:
            host, port = split_host_port(self.endpoint)
            self._listener = socket.create_server((host, port))
            self.endpoint = "tcp://%s:%d" % self._listener.getsockname()[:2]
            t = threading.Thread(target=self._accept_loop, name="g2r-accept", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def close(self):
        self._stop.set()
        if self.endpoint.startswith("inproc://"):
            with _INPROC_LOCK:
                _INPROC.pop(self.endpoint[len("inproc://") :], None)
        if self._listener is not None:
            self._listener.close()
        for conn in list(self._conns):
            conn.shutdown()
        for t in self._threads:
            t.join(timeout=5)
        for conn in list(self._conns):
            conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def attach(self, sock: socket.socket):
        conn = Connection(sock)
        self._conns.append(conn)
        t = threading.Thread(target=self._session, args=(conn,), name="g2r-session", daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            self.attach(sock)

    # sessions
    def _session(self, conn: Connection):
        try:
            hello = conn.recv(timeout=10)
            if hello.kind != Kind.Hello:
                raise ProtocolViolation(f"expected Hello, got {hello.kind.name}")
            request = json.loads(hello.payload or b"{}")
            keys = frozenset(stream_key(s) for s in request.get("subscribe", []))
            conn.send(Message(Kind.Hello, payload=json.dumps({"mode": self.mode, **self.info}).encode()))
            if self.mode == "sync":
                self._sync_session(conn, keys)
            else:
                self._async_session(conn, keys)
        except (ConnectionClosed, WireTimeout, OSError):
            pass
        except Exception as exc:  # surfaced through .errors for tests/diagnostics
            log.exception("server session failed")
            self.errors.append(exc)
        finally:
            conn.close()

    def _tick(self, keys):
        with self._engine_lock:
            return self.engine_callback(keys)

    def _sync_session(self, conn: Connection, keys):
        held = []  # (release_frame, seq, msg)
        seq = 0
        while not self._stop.is_set():
            msg = conn.recv()
            if msg.kind == Kind.TickRequest:
                frame_id, messages = self._tick(keys)
                if self.cut_at_frame is not None and frame_id >= self.cut_at_frame:
                    self._cut(conn, messages)
                    return
                for m in messages:
                    delay = self.jitter.delay(m.stream_key) if self.jitter else 0
                    held.append((frame_id + delay, seq, m))
                    seq += 1
                held.sort(key=lambda item: (item[0], item[1]))
                while held and held[0][0] <= frame_id:
                    conn.send(held.pop(0)[2])
                conn.send(Message(Kind.TickAck, frame_id))
            elif msg.kind == Kind.ControlCommand:
                self._control(msg)
            elif msg.kind == Kind.Bye:
                for _, _, m in held:
                    conn.send(m)
                conn.send(Message(Kind.Bye))
                return
            else:
                raise ProtocolViolation(f"unexpected {msg.kind.name} in synchronous session")

    def _async_session(self, conn: Connection, keys):
        bye = threading.Event()

        def reader():
            try:
                while not bye.is_set():
                    msg = conn.recv()
                    if msg.kind == Kind.Bye:
                        bye.set()
                    elif msg.kind == Kind.ControlCommand:
                        self._control(msg)
            except (G2RError, OSError):
                bye.set()

        t = threading.Thread(target=reader, name="g2r-async-reader", daemon=True)
        t.start()
        try:
            self._async_loop(conn, keys, bye)
        finally:
            # the reader must be gone before the socket is closed, or a reused fd could feed it
            conn.shutdown()
            t.join(timeout=5)

    def _async_loop(self, conn: Connection, keys, bye: threading.Event):
        history = defaultdict(deque)
        frames = 0
        while not self._stop.is_set() and not bye.is_set():
            if self.max_frames is not None and frames >= self.max_frames:
                break
            frame_id, messages = self._tick(keys)
            frames += 1
            if self.cut_at_frame is not None and frame_id >= self.cut_at_frame:
                self._cut(conn, messages)
                return
            for m in messages:
                delay = self.stream_delays.get(m.stream_key, 0)
                if not delay:
                    conn.send(m)
                    continue
                queue = history[m.stream_key]
                queue.append(m)
                if len(queue) > delay:
                    conn.send(queue.popleft())
            # marks the end of this engine tick's batch; clients use it as a staging barrier
            conn.send(Message(Kind.TickAck, frame_id))
            if self.period:
                self._stop.wait(self.period)
        if not bye.is_set():
            conn.send(Message(Kind.Bye))
            bye.wait(timeout=5)

    def _cut(self, conn: Connection, messages):
        if messages:
            data = encode_message(messages[0])
            conn.send_raw(data[: max(1, len(data) // 2)])
        conn.shutdown()

    def _control(self, msg: Message):
        if self.on_control is not None:
            with self._engine_lock:
                self.on_control(json.loads(msg.payload or b"{}"))


_INPROC: dict[str, Server] = {}
_INPROC_LOCK = threading.Lock()


def split_host_port(endpoint: str):
    if endpoint.startswith("tcp://"):
        endpoint = endpoint[len("tcp://") :]
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


def serve(engine_callback: EngineCallback, endpoint: str, mode: str = "sync", **kwargs) -> Server:
    return Server(engine_callback, endpoint, mode, **kwargs).start()


# -- client ------------------------------------------------------------------------


class ClientSession:
    def __init__(self, conn: Connection, subscribe: Iterable[str], timeout: float = 10.0):
        self.conn = conn
        self.subscribe = [stream_name(stream_key(s)) for s in subscribe]
        self.timeout = timeout
        self._requests = 0
        conn.send(Message(Kind.Hello, payload=json.dumps({"subscribe": self.subscribe}).encode()))
        reply = conn.recv(timeout=timeout)
        if reply.kind != Kind.Hello:
            conn.close()
            raise ProtocolViolation(f"expected Hello reply, got {reply.kind.name}")
        self.info = json.loads(reply.payload or b"{}")
        self.mode = self.info.get("mode", "sync")
        self.finished = False

    def tick(self) -> tuple[int, list[Message]]:
        """Request one tick; returns the acked frame id and every message received before the ack."""
        self.conn.send(Message(Kind.TickRequest, self._requests))
        self._requests += 1
        received = []
        while True:
            msg = self.recv()
            if msg.kind == Kind.TickAck:
                return msg.frame_id, received
            if msg.kind == Kind.SensorData:
                received.append(msg)
            elif msg.kind == Kind.Bye:
                self.finished = True
                raise ConnectionClosed("engine said Bye")
            else:
                self.conn.close()
                raise ProtocolViolation(f"unexpected {msg.kind.name} while waiting for TickAck")

    def recv(self, timeout: float | None = -1) -> Message:
        return self.conn.recv(self.timeout if timeout == -1 else timeout)

    def control(self, command: dict):
        self.conn.send(Message(Kind.ControlCommand, payload=json.dumps(command, sort_keys=True).encode()))

    def finish(self) -> list[Message]:
        """Say Bye and return any sensor data the engine still flushes before its Bye."""
        leftovers = []
        if self.finished or self.conn.closed:
            return leftovers
        try:
            self.conn.send(Message(Kind.Bye))
            while True:
                msg = self.recv()
                if msg.kind == Kind.Bye:
                    break
                if msg.kind == Kind.SensorData:
                    leftovers.append(msg)
        except (ConnectionClosed, WireTimeout):
            pass
        finally:
            self.finished = True
        return leftovers

    def close(self):
        if not self.finished:
            self.finish()
        self.conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect(endpoint: str, subscribe: Iterable[str], timeout: float = 10.0) -> ClientSession:
    if endpoint.startswith("inproc://"):
        with _INPROC_LOCK:
            server = _INPROC.get(endpoint[len("inproc://") :])
        if server is None:
            raise ConnectionRefused(f"nothing is serving {endpoint}")
        ours, theirs = socket.socketpair()
        server.attach(theirs)
        sock = ours
    else:
        host, port = split_host_port(endpoint)
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except ConnectionRefusedError as exc:
            raise ConnectionRefused(str(exc)) from None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return ClientSession(Connection(sock), subscribe, timeout)
