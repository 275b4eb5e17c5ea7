from g2r.wire.codec import (
    HEADER_SIZE,
    BadMagic,
    Kind,
    LengthMismatch,
    MalformedHeader,
    Message,
    PayloadTooLarge,
    Sensor,
    TruncatedPayload,
    UnsupportedVersion,
    WireError,
    WirePrecision,
    array_from_message,
    array_message,
    decode_message,
    encode_message,
    message_plane,
    plane_message,
    raw_message,
)
from g2r.wire.transport import (
    ClientSession,
    Connection,
    ConnectionClosed,
    ConnectionRefused,
    Jitter,
    ProtocolViolation,
    Server,
    WireTimeout,
    connect,
    serve,
    stream_key,
    stream_name,
)
