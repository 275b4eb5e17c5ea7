"""Seeded generators for valid and corrupted wire messages, shared by tests."""

import random

from g2r.core import GBufferId
from g2r.wire.codec import BYTES_PER_SAMPLE, HEADER_SIZE, Kind, Message, Sensor, WirePrecision


def random_message(rng: random.Random) -> Message:
    kind = rng.choice(list(Kind))
    frame_id = rng.choice([0, 1, rng.randrange(2**64), 2**64 - 1, rng.randrange(1000)])
    if kind in (Kind.TickRequest, Kind.TickAck):
        return Message(kind, frame_id)
    if kind != Kind.SensorData:
        payload = rng.randbytes(rng.randrange(0, 64))
        return Message(kind, frame_id, payload=payload)
    sensor = rng.choice(list(Sensor))
    gbuffer_id = rng.choice(list(GBufferId)) if sensor == Sensor.GBuffer else None
    precision = rng.choice(list(WirePrecision))
    w, h, c = rng.randint(1, 6), rng.randint(1, 6), rng.choice([1, 3, 4, 12])
    payload = rng.randbytes(w * h * c * BYTES_PER_SAMPLE[precision])
    return Message(kind, frame_id, sensor, gbuffer_id, payload, w, h, c, precision)


def corrupt(rng: random.Random, data: bytes) -> bytes:
    data = bytearray(data)
    choice = rng.randrange(6)
    if choice == 0 and data:
        for _ in range(rng.randint(1, 4)):
            data[rng.randrange(len(data))] = rng.randrange(256)
    elif choice == 1:
        data = data[: rng.randrange(len(data) + 1)]
    elif choice == 2:
        data[:4] = rng.randbytes(4)
    elif choice == 3 and len(data) >= HEADER_SIZE:
        # lie about the payload length
        data[20:24] = rng.randrange(2**32).to_bytes(4, "little")
    elif choice == 4:
        data = bytearray(rng.randbytes(rng.randrange(0, 96)))
    else:
        data[4:6] = rng.randrange(2, 2**16).to_bytes(2, "little")
    return bytes(data)
