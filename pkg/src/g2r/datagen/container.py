"""Packed float container (``.g2r``) for G-buffer sets and feature matrices.

Layout, all little-endian::

    magic "G2RB" | version u16 | width u32 | height u32 | count u16 | label_len u16
    count x (buffer id u8, channels u8)
    label (utf-8, label_len bytes)
    count x planar float32 data, channel-major, rows top to bottom
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from g2r.errors import G2RError

MAGIC = b"G2RB"
VERSION = 1
_HEAD = struct.Struct("<4sHIIHH")
_ENTRY = struct.Struct("<BB")


class ContainerError(G2RError):
    pass


def encode_container(planes: list[tuple[int, np.ndarray]], label: str = "") -> bytes:
    """``planes`` are ``(id, array of shape (h, w, c))`` sharing one ``(h, w)``."""
    if not planes:
        raise ContainerError("container needs at least one plane")
    shapes = {np.asarray(a).shape[:2] for _, a in planes}
    if len(shapes) != 1:
        raise ContainerError(f"planes disagree on dimensions: {sorted(shapes)}")
    height, width = shapes.pop()
    label_bytes = label.encode()
    out = [_HEAD.pack(MAGIC, VERSION, width, height, len(planes), len(label_bytes))]
    arrays = []
    for pid, arr in planes:
        arr = np.asarray(arr, dtype="<f4")
        if arr.ndim == 2:
            arr = arr[:, :, None]
        out.append(_ENTRY.pack(int(pid), arr.shape[2]))
        arrays.append(np.ascontiguousarray(np.moveaxis(arr, 2, 0)))
    out.append(label_bytes)
    out.extend(a.tobytes() for a in arrays)
    return b"".join(out)


def decode_container(data: bytes) -> tuple[list[tuple[int, np.ndarray]], str]:
    if len(data) < _HEAD.size:
        raise ContainerError("container shorter than its header")
    magic, version, width, height, count, label_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"bad container magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = _HEAD.size
    entries = []
    for _ in range(count):
        if pos + _ENTRY.size > len(data):
            raise ContainerError("container truncated in buffer table")
        entries.append(_ENTRY.unpack_from(data, pos))
        pos += _ENTRY.size
    try:
        label = data[pos : pos + label_len].decode()
    except UnicodeDecodeError as exc:
        raise ContainerError("container label is not utf-8") from exc
    pos += label_len
    planes = []
    for pid, channels in entries:
        n = width * height * channels
        if pos + 4 * n > len(data):
            raise ContainerError("container truncated in plane data")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(channels, height, width)
        planes.append((pid, np.moveaxis(arr, 0, 2).astype(np.float32)))
        pos += 4 * n
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes after container data")
    return planes, label


def write_matrix(path, matrix: np.ndarray, label: str = ""):
    """An N x D feature matrix stored as one single-channel plane (height N, width D)."""
    m = np.asarray(matrix, dtype=np.float32)
    if m.ndim != 2:
        raise ContainerError(f"feature matrix must be 2-D, got shape {m.shape}")
    Path(path).write_bytes(encode_container([(0, m[:, :, None])], label))


def read_matrix(path) -> tuple[np.ndarray, str]:
    planes, label = decode_container(Path(path).read_bytes())
    if len(planes) != 1 or planes[0][1].shape[2] != 1:
        raise ContainerError("feature file must hold exactly one single-channel plane")
    return planes[0][1][:, :, 0], label
