"""Fixed 32-byte little-endian header framing for engine <-> client messages.

Layout (offsets in bytes)::

    0  magic       4s   b"G2RL"
    4  version     u16
    6  kind        u8
    7  sensor      u8   (255 = none)
    8  gbuffer_id  u8   (255 = none)
    9  channels    u8
    10 precision   u8
    11 reserved    u8   (must be 0)
    12 frame_id    u64
    20 payload_len u32
    24 width       u32
    28 height      u32
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from g2r.core import GBufferId, ImagePlane, Precision as PlanePrecision
from g2r.errors import G2RError

MAGIC = b"G2RL"
VERSION = 1
HEADER = struct.Struct("<4sHBBBBBBQIII")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 2**31
NONE = 255

assert HEADER_SIZE == 32


class Kind(enum.IntEnum):
    Hello = 0
    TickRequest = 1
    TickAck = 2
    SensorData = 3
    ControlCommand = 4
    Bye = 5


class Sensor(enum.IntEnum):
    Rgb = 0
    GBuffer = 1
    Stencil = 2
    Lidar = 3
    VehicleStatus = 4
    Instance = 5


class WirePrecision(enum.IntEnum):
    F32 = 0
    F16 = 1
    U8 = 2
    U32 = 3
    RAW = 4


BYTES_PER_SAMPLE = {
    WirePrecision.F32: 4,
    WirePrecision.F16: 2,
    WirePrecision.U8: 1,
    WirePrecision.U32: 4,
    WirePrecision.RAW: 1,
}

_DTYPES = {
    WirePrecision.F32: np.dtype("<f4"),
    WirePrecision.F16: np.dtype("<f2"),
    WirePrecision.U8: np.dtype("u1"),
    WirePrecision.U32: np.dtype("<u4"),
    WirePrecision.RAW: np.dtype("u1"),
}


class WireError(G2RError):
    """Base for framing errors. None of these corrupt the byte stream position."""


class BadMagic(WireError):
    pass


class UnsupportedVersion(WireError):
    pass


class TruncatedPayload(WireError):
    """Not enough bytes yet. Retryable once more data arrives."""

    def __init__(self, needed: int, available: int):
        super().__init__(f"need {needed} bytes, have {available}")
        self.needed = needed
        self.available = available


class LengthMismatch(WireError):
    pass


class MalformedHeader(WireError):
    pass


class PayloadTooLarge(WireError):
    pass


@dataclass(frozen=True)
class Message:
    kind: Kind
    frame_id: int = 0
    sensor: Sensor | None = None
    gbuffer_id: GBufferId | None = None
    payload: bytes = b""
    width: int = 0
    height: int = 0
    channels: int = 0
    precision: WirePrecision = WirePrecision.RAW

    def validate(self):
        if not 0 <= self.frame_id < 2**64:
            raise MalformedHeader(f"frame_id {self.frame_id} does not fit in u64")
        if self.kind in (Kind.TickRequest, Kind.TickAck) and self.payload:
            raise MalformedHeader(f"{self.kind.name} must carry an empty payload")
        if self.kind == Kind.SensorData:
            if self.sensor is None:
                raise MalformedHeader("SensorData requires a sensor")
            if not self.payload:
                raise MalformedHeader("SensorData requires a non-empty payload")
            expected = self.width * self.height * self.channels * BYTES_PER_SAMPLE[self.precision]
            if expected != len(self.payload):
                raise LengthMismatch(f"payload is {len(self.payload)} bytes, dimensions imply {expected}")
        for name in ("width", "height"):
            if not 0 <= getattr(self, name) < 2**32:
                raise MalformedHeader(f"{name} does not fit in u32")
        if not 0 <= self.channels < 256:
            raise MalformedHeader("channels does not fit in u8")

    @property
    def stream_key(self):
        """Identifies the logical stream this message belongs to."""
        return (self.sensor, self.gbuffer_id)


def encode_message(msg: Message) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"payload of {len(msg.payload)} bytes exceeds {MAX_PAYLOAD}")
    msg.validate()
    header = HEADER.pack(
        MAGIC,
        VERSION,
        int(msg.kind),
        NONE if msg.sensor is None else int(msg.sensor),
        NONE if msg.gbuffer_id is None else int(msg.gbuffer_id),
        msg.channels,
        int(msg.precision),
        0,
        msg.frame_id,
        len(msg.payload),
        msg.width,
        msg.height,
    )
    return header + bytes(msg.payload)


def decode_header(buf) -> tuple:
    """Validate the fixed header and return its unpacked fields."""
    view = bytes(buf[:HEADER_SIZE])
    if len(view) >= 4 and view[:4] != MAGIC:
        raise BadMagic(f"bad magic {view[:4]!r}")
    if len(view) < HEADER_SIZE:
        if len(view) < 4 and view != MAGIC[: len(view)]:
            raise BadMagic(f"bad magic prefix {view!r}")
        raise TruncatedPayload(HEADER_SIZE, len(view))
    fields = HEADER.unpack_from(view)
    _, version, kind, sensor, gbuffer_id, channels, precision, reserved, frame_id, length, width, height = fields
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} (supported: {VERSION})")
    if length > MAX_PAYLOAD:
        raise LengthMismatch(f"declared payload of {length} bytes exceeds limit")
    try:
        kind = Kind(kind)
        sensor = None if sensor == NONE else Sensor(sensor)
        gbuffer_id = None if gbuffer_id == NONE else GBufferId(gbuffer_id)
        precision = WirePrecision(precision)
    except ValueError as exc:
        raise MalformedHeader(str(exc)) from None
    if reserved != 0:
        raise MalformedHeader("reserved byte must be zero")
    if kind in (Kind.TickRequest, Kind.TickAck) and length:
        raise LengthMismatch(f"{kind.name} declares a {length}-byte payload")
    if kind == Kind.SensorData:
        if sensor is None:
            raise MalformedHeader("SensorData without sensor")
        expected = width * height * channels * BYTES_PER_SAMPLE[precision]
        if length == 0 or expected != length:
            raise LengthMismatch(f"declared payload {length} bytes, dimensions imply {expected}")
    return kind, sensor, gbuffer_id, channels, precision, frame_id, length, width, height


def decode_message(buf) -> tuple[Message, int]:
    """Decode one message from the front of ``buf``.

    Returns ``(message, bytes_consumed)``. Raises ``TruncatedPayload`` when
    more bytes are needed; the caller keeps its buffer and retries.
    """
    kind, sensor, gbuffer_id, channels, precision, frame_id, length, width, height = decode_header(buf)
    total = HEADER_SIZE + length
    if len(buf) < total:
        raise TruncatedPayload(total, len(buf))
    payload = bytes(buf[HEADER_SIZE:total])
    msg = Message(kind, frame_id, sensor, gbuffer_id, payload, width, height, channels, precision)
    return msg, total


# -- payload helpers ---------------------------------------------------------


def plane_message(
    sensor: Sensor,
    frame_id: int,
    plane: ImagePlane,
    precision: WirePrecision = WirePrecision.F32,
    gbuffer_id: GBufferId | None = None,
) -> Message:
    if precision == WirePrecision.U8:
        raw = plane.to_u8()
    elif precision in (WirePrecision.F32, WirePrecision.F16):
        raw = plane.data.astype(_DTYPES[precision])
    else:
        raise ValueError(f"image planes cannot travel as {precision.name}")
    return Message(
        Kind.SensorData,
        frame_id,
        sensor,
        gbuffer_id,
        np.ascontiguousarray(raw).tobytes(),
        plane.width,
        plane.height,
        plane.channels,
        precision,
    )


def message_plane(msg: Message) -> ImagePlane:
    arr = array_from_message(msg)
    if msg.precision == WirePrecision.U8:
        return ImagePlane.from_u8(arr)
    tag = PlanePrecision.F16 if msg.precision == WirePrecision.F16 else PlanePrecision.F32
    return ImagePlane(arr.astype(np.float32), tag)


def array_message(
    sensor: Sensor,
    frame_id: int,
    array: np.ndarray,
    precision: WirePrecision,
    gbuffer_id: GBufferId | None = None,
) -> Message:
    """Pack an ``(h, w, c)`` array without any value conversion."""
    arr = np.ascontiguousarray(np.asarray(array).astype(_DTYPES[precision], copy=False))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    return Message(Kind.SensorData, frame_id, sensor, gbuffer_id, arr.tobytes(), w, h, c, precision)


def array_from_message(msg: Message) -> np.ndarray:
    dtype = _DTYPES[msg.precision]
    return np.frombuffer(msg.payload, dtype=dtype).reshape(msg.height, msg.width, msg.channels)


def raw_message(sensor: Sensor, frame_id: int, data: bytes) -> Message:
    return Message(Kind.SensorData, frame_id, sensor, None, bytes(data), len(data), 1, 1, WirePrecision.RAW)


def describe(msg: Message) -> str:
    parts = [f"{msg.kind.name}", f"frame={msg.frame_id}"]
    if msg.sensor is not None:
        parts.append(f"sensor={msg.sensor.name}")
    if msg.gbuffer_id is not None:
        parts.append(f"gbuffer={msg.gbuffer_id.name}")
    if msg.kind == Kind.SensorData:
        parts.append(f"{msg.width}x{msg.height}x{msg.channels} {msg.precision.name}")
    parts.append(f"len={len(msg.payload)}")
    return " ".join(parts)
