"""Stand-alone external enhancer for exercising the bridge.

Speaks the bridge protocol on stdin/stdout (``--listen host:port`` serves TCP
instead). Modes:

* ``echo``: returns the request's RGB frame unchanged.
* ``slow``: like echo, after sleeping ``--delay`` seconds.
* ``wrong-size``: returns a frame one column narrower than requested.
* ``garbage``: replies with bytes that are not a valid message.

Usage: ``python -m g2r.enhance.echo --mode echo``
"""

from __future__ import annotations

import argparse
import socket
import sys
import time

from g2r.wire.codec import Kind, Message, Sensor, WirePrecision
from g2r.wire.transport import Connection, ConnectionClosed, split_host_port

MODES = ("echo", "slow", "wrong-size", "garbage")


def reply_for(msg: Message, mode: str, delay: float) -> bytes | Message:
    if mode == "slow":
        time.sleep(delay)
    if mode == "garbage":
        return b"NOPE" + bytes(60)
    if mode == "wrong-size":
        w = max(1, msg.width - 1)
        per_px = msg.channels * 4
        payload = msg.payload[: w * msg.height * per_px]
        if len(payload) < w * msg.height * per_px:
            payload = payload + bytes(w * msg.height * per_px - len(payload))
        return Message(Kind.SensorData, msg.frame_id, Sensor.Rgb, None, payload, w, msg.height, 3, WirePrecision.F32)
    return msg


def serve_connection(conn: Connection, mode: str, delay: float):
    while True:
        try:
            msg = conn.recv()
        except ConnectionClosed:
            return
        if msg.kind == Kind.Hello:
            conn.send(Message(Kind.Hello, payload=b'{"role": "enhancer"}'))
        elif msg.kind == Kind.Bye:
            return
        elif msg.kind == Kind.SensorData and msg.sensor == Sensor.Rgb:
            reply = reply_for(msg, mode, delay)
            if isinstance(reply, bytes):
                conn.send_raw(reply)
            else:
                conn.send(reply)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mode", choices=MODES, default="echo")
    ap.add_argument("--delay", type=float, default=1.0, help="reply latency for --mode slow (seconds)")
    ap.add_argument("--listen", help="serve TCP on host:port instead of stdin/stdout")
    args = ap.parse_args(argv)
    if args.listen:
        host, port = split_host_port(args.listen)
        with socket.create_server((host, port)) as srv:
            print("listening on %s:%d" % srv.getsockname()[:2], file=sys.stderr, flush=True)
            while True:
                sock, _ = srv.accept()
                serve_connection(Connection(sock), args.mode, args.delay)
    sock = socket.socket(fileno=sys.stdin.fileno())
    serve_connection(Connection(sock), args.mode, args.delay)
    return 0


if __name__ == "__main__":
    sys.exit(main())
