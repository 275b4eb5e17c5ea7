"""Bridge to an enhancer running in another process.

Endpoints:

* ``cmd:<command line>`` spawns the command with a socket as its stdin/stdout.
* ``tcp://host:port`` (or ``host:port``) connects to a listening enhancer.

A request is the enhancer input as consecutive SensorData messages sharing one
frame id: one GBuffer message per group stream (the gbuffer id slot carries
the group index), the one-hot stack as a 12-channel U8 Stencil message, and
finally the F32 RGB frame, which ends the request. The reply is a single Rgb
SensorData message.
"""

from __future__ import annotations

import json
import shlex
import socket
import subprocess
import time

import numpy as np

from g2r.core import EnhancerInput, GBufferId, ImagePlane
from g2r.enhance.base import Enhancer, EnhancerSpec
from g2r.errors import DimensionMismatch, G2RError
from g2r.wire.codec import (
    Kind,
    Message,
    Sensor,
    WireError,
    WirePrecision,
    array_message,
    message_plane,
    plane_message,
)
from g2r.wire.transport import Connection, ConnectionClosed, WireTimeout, split_host_port

STARTUP_TIMEOUT = 20.0


class ExternalTimeout(G2RError):
    pass


class ExternalProtocolError(G2RError):
    pass


def request_messages(inp: EnhancerInput) -> list[Message]:
    fid = inp.frame_id
    msgs = []
    for group in sorted(inp.streams):
        stream = np.asarray(inp.streams[group], np.float32)
        msgs.append(array_message(Sensor.GBuffer, fid, np.moveaxis(stream, 0, -1), WirePrecision.F32, GBufferId(group)))
    onehot = np.moveaxis(np.asarray(inp.onehot.planes, np.uint8), 0, -1)
    msgs.append(array_message(Sensor.Stencil, fid, onehot, WirePrecision.U8))
    msgs.append(plane_message(Sensor.Rgb, fid, inp.rgb, WirePrecision.F32))
    return msgs


class ExternalEnhancer(Enhancer):
    """Owns one subprocess or socket. Not thread-safe; the pipeline serializes calls."""

    def __init__(self, spec: EnhancerSpec):
        super().__init__(spec)
        self.endpoint = spec.external_endpoint
        self._conn: Connection | None = None
        self._proc: subprocess.Popen | None = None

    # connection management
    def _open(self):
        if self.endpoint.startswith("cmd:"):
            parent, child = socket.socketpair()
            try:
                self._proc = subprocess.Popen(
                    shlex.split(self.endpoint[4:]), stdin=child, stdout=child, close_fds=True
                )
            except OSError as exc:
                parent.close()
                raise ExternalProtocolError(f"cannot start external enhancer: {exc}") from None
            finally:
                child.close()
            sock = parent
        else:
            host, port = split_host_port(self.endpoint)
            try:
                sock = socket.create_connection((host, port), timeout=STARTUP_TIMEOUT)
            except OSError as exc:
                raise ExternalProtocolError(f"cannot reach external enhancer at {self.endpoint}: {exc}") from None
        self._conn = Connection(sock)
        self._handshake()

    def _handshake(self):
        hello = json.dumps({"role": "enhancer-client"}).encode()
        try:
            self._conn.send(Message(Kind.Hello, payload=hello))
            reply = self._conn.recv(timeout=STARTUP_TIMEOUT)
        except (WireTimeout, ConnectionClosed, WireError) as exc:
            self.close()
            raise ExternalProtocolError(f"external enhancer handshake failed: {exc}") from None
        if reply.kind != Kind.Hello:
            self.close()
            raise ExternalProtocolError(f"expected Hello from external enhancer, got {reply.kind.name}")

    def _apply(self, inp: EnhancerInput) -> ImagePlane:
        if self._conn is None:
            self._open()
        deadline = time.monotonic() + self.spec.deadline
        try:
            self._conn.sock.settimeout(self.spec.deadline)
            for msg in request_messages(inp):
                self._conn.send(msg)
            reply = self._conn.recv(deadline=deadline)
        except WireTimeout:
            self._abort()  # a late reply would desynchronize the next request
            raise ExternalTimeout(f"no reply for frame {inp.frame_id} within {self.spec.deadline}s") from None
        except (ConnectionClosed, WireError) as exc:
            late = time.monotonic() >= deadline
            self._abort()
            if late:
                raise ExternalTimeout(f"no reply for frame {inp.frame_id} within {self.spec.deadline}s") from None
            raise ExternalProtocolError(f"external enhancer stream failed: {exc}") from None
        return self._check_reply(reply, inp)

    def _check_reply(self, reply: Message, inp: EnhancerInput) -> ImagePlane:
        if reply.kind != Kind.SensorData or reply.sensor != Sensor.Rgb:
            self._abort()
            raise ExternalProtocolError(f"expected an Rgb SensorData reply, got {reply.kind.name}/{reply.sensor}")
        if reply.frame_id != inp.frame_id:
            self._abort()
            raise ExternalProtocolError(f"reply for frame {reply.frame_id}, expected {inp.frame_id}")
        if (reply.width, reply.height, reply.channels) != (inp.rgb.width, inp.rgb.height, 3):
            raise DimensionMismatch(
                f"external enhancer returned {reply.width}x{reply.height}x{reply.channels}, "
                f"expected {inp.rgb.width}x{inp.rgb.height}x3"
            )
        if reply.precision not in (WirePrecision.F32, WirePrecision.F16, WirePrecision.U8):
            raise ExternalProtocolError(f"reply precision {reply.precision.name} is not an image format")
        try:
            plane = message_plane(reply)
        except ValueError as exc:
            raise ExternalProtocolError(str(exc)) from None
        return ImagePlane(np.clip(plane.data, 0.0, 1.0), plane.precision)

    def _abort(self):
        if self._proc is not None:
            self._proc.kill()
        self.close()

    def close(self):
        if self._conn is not None:
            try:
                if not self._conn.closed:
                    self._conn.send(Message(Kind.Bye))
            except G2RError:
                pass
            self._conn.close()
            self._conn = None
        if self._proc is not None:
            try:
                self._proc.wait(timeout=0.5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
            self._proc = None
