"""Image planes, G-buffers, semantic maps and the pure transforms between them.

All pixel math happens in float32 with samples in [0, 1]. Arrays are stored
row-major as ``(height, width, channels)`` and are made read-only on
construction so that instances can be shared freely between threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from g2r.errors import (
    DimensionMismatch,
    MissingBuffer,
    OutOfRangeClassId,
    PolicyError,
    StencilRoundingError,
    ZeroDimension,
)

NUM_CLASSES = 29
NUM_GROUPS = 12


class Precision(enum.IntEnum):
    F32 = 0
    F16 = 1
    U8 = 2


class GBufferId(enum.IntEnum):
    SceneColor = 0
    Albedo = 1
    GBufferD = 2
    SSAO = 3
    Normals = 4
    Depth = 5
    Metallic = 6
    Specular = 7
    Roughness = 8
    CustomStencil = 9
    Velocity = 10
    GBufferE = 11
    GBufferF = 12


EXCLUDED_BUFFERS = frozenset({GBufferId.Velocity, GBufferId.GBufferE, GBufferId.GBufferF})

BUFFER_CHANNELS = {
    GBufferId.SceneColor: 3,
    GBufferId.Albedo: 3,
    GBufferId.GBufferD: 3,
    GBufferId.SSAO: 1,
    GBufferId.Normals: 3,
    GBufferId.Depth: 1,
    GBufferId.Metallic: 1,
    GBufferId.Specular: 1,
    GBufferId.Roughness: 1,
    GBufferId.CustomStencil: 1,
    GBufferId.Velocity: 3,
    GBufferId.GBufferE: 4,
    GBufferId.GBufferF: 4,
}


class SemanticClass(enum.IntEnum):
    """Raw semantic class IDs carried by the custom stencil (Cityscapes-style)."""

    Unlabeled = 0
    Road = 1
    Sidewalk = 2
    Building = 3
    Wall = 4
    Fence = 5
    Pole = 6
    TrafficLight = 7
    TrafficSign = 8
    Vegetation = 9
    Terrain = 10
    Sky = 11
    Pedestrian = 12
    Rider = 13
    Car = 14
    Truck = 15
    Bus = 16
    Train = 17
    Motorcycle = 18
    Bicycle = 19
    Static = 20
    Dynamic = 21
    Other = 22
    Water = 23
    RoadLine = 24
    Ground = 25
    Bridge = 26
    RailTrack = 27
    GuardRail = 28


VEHICLE_CLASSES = (
    SemanticClass.Car,
    SemanticClass.Truck,
    SemanticClass.Bus,
    SemanticClass.Train,
    SemanticClass.Motorcycle,
    SemanticClass.Bicycle,
)


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """A ``(height, width, channels)`` float32 image with a storage precision tag."""

    data: np.ndarray
    precision: Precision = Precision.F32

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise DimensionMismatch(f"expected (h, w, c) array, got shape {data.shape}")
        if data.shape[2] not in (1, 3, 4):
            raise DimensionMismatch(f"channel count must be 1, 3 or 4, got {data.shape[2]}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ZeroDimension(f"empty image {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("image samples must be finite")
        if not data.flags.owndata or data.flags.writeable:
            data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "precision", Precision(self.precision))

    @classmethod
    def from_u8(cls, data: np.ndarray) -> "ImagePlane":
        return cls(np.asarray(data, dtype=np.float32) / 255.0, Precision.U8)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def to_u8(self) -> np.ndarray:
        return np.clip(np.rint(self.data * 255.0), 0, 255).astype(np.uint8)

    def __eq__(self, other):
        if not isinstance(other, ImagePlane):
            return NotImplemented
        return self.precision == other.precision and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"ImagePlane({self.width}x{self.height}x{self.channels}, {self.precision.name})"


@dataclass(frozen=True, eq=False)
class SemanticMap:
    """Per-pixel raw class IDs, shape ``(height, width)``."""

    class_ids: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.class_ids)
        if ids.ndim != 2:
            raise DimensionMismatch(f"semantic map must be 2-D, got shape {ids.shape}")
        if ids.shape[0] < 1 or ids.shape[1] < 1:
            raise ZeroDimension(f"empty semantic map {ids.shape}")
        if ids.dtype != np.uint8:
            if ids.size and (ids.min() < 0 or ids.max() > 255):
                bad = np.argwhere((ids < 0) | (ids > 255))[0]
                raise OutOfRangeClassId((int(bad[1]), int(bad[0])), int(ids[tuple(bad)]))
            ids = ids.astype(np.uint8)
        else:
            ids = ids.copy()
        ids.flags.writeable = False
        object.__setattr__(self, "class_ids", ids)

    @property
    def height(self) -> int:
        return self.class_ids.shape[0]

    @property
    def width(self) -> int:
        return self.class_ids.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def __eq__(self, other):
        if not isinstance(other, SemanticMap):
            return NotImplemented
        return np.array_equal(self.class_ids, other.class_ids)

    def __repr__(self):
        return f"SemanticMap({self.width}x{self.height})"


@dataclass(frozen=True)
class GBufferSet:
    frame_id: int
    buffers: Mapping[GBufferId, ImagePlane]

    def __post_init__(self):
        sizes = {plane.size for plane in self.buffers.values()}
        if len(sizes) > 1:
            raise DimensionMismatch(f"G-buffers disagree on dimensions: {sorted(sizes)}")
        for bid in (GBufferId.CustomStencil, GBufferId.Depth):
            plane = self.buffers.get(bid)
            if plane is not None and plane.channels != 1:
                raise DimensionMismatch(f"{bid.name} must be single-channel")
        object.__setattr__(self, "buffers", dict(self.buffers))

    @property
    def size(self) -> tuple[int, int] | None:
        for plane in self.buffers.values():
            return plane.size
        return None

    def __getitem__(self, bid: GBufferId) -> ImagePlane:
        try:
            return self.buffers[bid]
        except KeyError:
            raise MissingBuffer(bid) from None

    def __contains__(self, bid) -> bool:
        return bid in self.buffers


@dataclass(frozen=True)
class ClassGrouping:
    """Surjective map from the 29 raw class IDs onto 12 group channels.

    ``buffer_policy[g]`` lists, in stacking order, the G-buffers that the
    encoder stream for group ``g`` receives.
    """

    group_of: tuple[int, ...]
    group_names: tuple[str, ...]
    buffer_policy: Mapping[int, tuple[GBufferId, ...]]

    def __post_init__(self):
        group_of = tuple(int(g) for g in self.group_of)
        names = tuple(self.group_names)
        policy = {int(g): tuple(GBufferId(b) for b in ids) for g, ids in self.buffer_policy.items()}
        object.__setattr__(self, "group_of", group_of)
        object.__setattr__(self, "group_names", names)
        object.__setattr__(self, "buffer_policy", policy)
        self.validate()

    def validate(self):
        if len(self.group_of) != NUM_CLASSES:
            raise PolicyError(f"group_of must cover all {NUM_CLASSES} class IDs, got {len(self.group_of)}")
        if len(self.group_names) != NUM_GROUPS:
            raise PolicyError(f"expected {NUM_GROUPS} group names, got {len(self.group_names)}")
        if any(not 0 <= g < NUM_GROUPS for g in self.group_of):
            raise PolicyError("group indices must lie in [0, 11]")
        if set(self.group_of) != set(range(NUM_GROUPS)):
            missing = sorted(set(range(NUM_GROUPS)) - set(self.group_of))
            raise PolicyError(f"groups {missing} have no class mapped to them")
        if set(self.buffer_policy) != set(range(NUM_GROUPS)):
            raise PolicyError("buffer_policy must define every group index exactly once")
        for g, ids in self.buffer_policy.items():
            if not ids:
                raise PolicyError(f"group {g} ({self.group_names[g]}) has an empty buffer policy")
            if len(set(ids)) != len(ids):
                raise PolicyError(f"group {g} lists a buffer twice")
            banned = EXCLUDED_BUFFERS.intersection(ids)
            if banned:
                names = ", ".join(sorted(b.name for b in banned))
                raise PolicyError(f"group {g} ({self.group_names[g]}) uses excluded buffers: {names}")
            if GBufferId.CustomStencil in ids:
                raise PolicyError("CustomStencil feeds the one-hot mask, not the encoder streams")
        sky = self.group_of[SemanticClass.Sky]
        if self.buffer_policy[sky] != (GBufferId.SceneColor,):
            raise PolicyError("the sky group may only use SceneColor")
        allowed_d = {self.group_of[SemanticClass.Vegetation], self.group_of[SemanticClass.Car]}
        for g, ids in self.buffer_policy.items():
            if GBufferId.GBufferD in ids and g not in allowed_d:
                raise PolicyError(f"GBufferD is only valid for vegetation and vehicles, not group {g}")

    def group_index(self, name: str) -> int:
        return self.group_names.index(name)

    def stream_channels(self, group: int) -> int:
        return sum(BUFFER_CHANNELS[b] for b in self.buffer_policy[group])

    @property
    def required_buffers(self) -> tuple[GBufferId, ...]:
        seen = []
        for g in range(NUM_GROUPS):
            for b in self.buffer_policy[g]:
                if b not in seen:
                    seen.append(b)
        return tuple(seen)

    @property
    def lookup(self) -> np.ndarray:
        """256-entry table; IDs >= 29 map to 255 so they can be detected."""
        table = np.full(256, 255, dtype=np.uint8)
        table[:NUM_CLASSES] = self.group_of
        return table


DEFAULT_GROUPS = (
    ("sky", (SemanticClass.Sky,)),
    ("road", (SemanticClass.Road, SemanticClass.RoadLine)),
    ("sidewalk", (SemanticClass.Sidewalk,)),
    ("building", (SemanticClass.Building,)),
    ("barrier", (SemanticClass.Wall, SemanticClass.Fence, SemanticClass.GuardRail)),
    ("pole", (SemanticClass.Pole, SemanticClass.Static, SemanticClass.Dynamic)),
    ("traffic_light", (SemanticClass.TrafficLight,)),
    ("traffic_sign", (SemanticClass.TrafficSign,)),
    ("vegetation", (SemanticClass.Vegetation, SemanticClass.Terrain)),
    ("person", (SemanticClass.Pedestrian, SemanticClass.Rider)),
    ("vehicle", VEHICLE_CLASSES),
    (
        "other",
        (
            SemanticClass.Ground,
            SemanticClass.Water,
            SemanticClass.Bridge,
            SemanticClass.RailTrack,
            SemanticClass.Other,
            SemanticClass.Unlabeled,
        ),
    ),
)

_SURFACE_BUFFERS = (
    GBufferId.SceneColor,
    GBufferId.Albedo,
    GBufferId.SSAO,
    GBufferId.Normals,
    GBufferId.Depth,
    GBufferId.Metallic,
    GBufferId.Specular,
    GBufferId.Roughness,
)


def default_grouping() -> ClassGrouping:
    group_of = [0] * NUM_CLASSES
    for g, (_, classes) in enumerate(DEFAULT_GROUPS):
        for c in classes:
            group_of[c] = g
    policy = {}
    for g, (name, _) in enumerate(DEFAULT_GROUPS):
        if name == "sky":
            policy[g] = (GBufferId.SceneColor,)
        elif name in ("vegetation", "vehicle"):
            policy[g] = _SURFACE_BUFFERS + (GBufferId.GBufferD,)
        else:
            policy[g] = _SURFACE_BUFFERS
    return ClassGrouping(tuple(group_of), tuple(n for n, _ in DEFAULT_GROUPS), policy)


def grouping_from_dict(raw: Mapping) -> ClassGrouping:
    """Build a grouping from ``{groups: [{name, classes, buffers}, ...]}``."""
    groups = raw["groups"]
    group_of = [-1] * NUM_CLASSES
    names, policy = [], {}
    for g, entry in enumerate(groups):
        names.append(str(entry["name"]))
        for c in entry["classes"]:
            c = SemanticClass[c] if isinstance(c, str) else SemanticClass(int(c))
            if group_of[c] != -1:
                raise PolicyError(f"class {c.name} assigned to two groups")
            group_of[c] = g
        policy[g] = tuple(GBufferId[b] if isinstance(b, str) else GBufferId(b) for b in entry["buffers"])
    if -1 in group_of:
        raise PolicyError(f"class {SemanticClass(group_of.index(-1)).name} is not assigned to any group")
    return ClassGrouping(tuple(group_of), tuple(names), policy)


@dataclass(frozen=True, eq=False)
class OneHotStack:
    """``(12, height, width)`` uint8 planes, exactly one set channel per pixel."""

    planes: np.ndarray

    def __post_init__(self):
        planes = np.array(self.planes, dtype=np.uint8)
        if planes.ndim != 3 or planes.shape[0] != NUM_GROUPS:
            raise DimensionMismatch(f"one-hot stack must be (12, h, w), got {planes.shape}")
        planes.flags.writeable = False
        object.__setattr__(self, "planes", planes)

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def __eq__(self, other):
        if not isinstance(other, OneHotStack):
            return NotImplemented
        return np.array_equal(self.planes, other.planes)


@dataclass(frozen=True, eq=False)
class EnhancerInput:
    frame_id: int
    rgb: ImagePlane
    onehot: OneHotStack
    streams: Mapping[int, np.ndarray] = field(default_factory=dict)


def semantic_from_stencil(plane: ImagePlane) -> SemanticMap:
    """Recover class IDs from a CustomStencil plane (ID / 255 per sample)."""
    if plane.channels != 1:
        raise DimensionMismatch("stencil plane must be single-channel")
    scaled = plane.data[:, :, 0].astype(np.float64) * 255.0
    ids = np.rint(scaled)
    # tolerance is in ID units; float32 storage of k/255 is off by ~1e-5
    if np.abs(scaled - ids).max(initial=0.0) > 0.5 / 255:
        raise StencilRoundingError("stencil samples deviate from integer IDs by more than 0.5/255")
    return SemanticMap(ids.astype(np.int64))


def stencil_plane(semantics: SemanticMap) -> ImagePlane:
    return ImagePlane.from_u8(semantics.class_ids[:, :, None])


def group_semantic_map(semantics: SemanticMap, grouping: ClassGrouping) -> OneHotStack:
    ids = semantics.class_ids
    groups = grouping.lookup[ids]
    if (groups == 255).any():
        y, x = np.argwhere(groups == 255)[0]
        raise OutOfRangeClassId((int(x), int(y)), int(ids[y, x]))
    planes = (groups[None, :, :] == np.arange(NUM_GROUPS, dtype=np.uint8)[:, None, None]).astype(np.uint8)
    return OneHotStack(planes)


def stack_filtered_gbuffers(
    gbuffers: GBufferSet, onehot: OneHotStack, grouping: ClassGrouping
) -> dict[int, np.ndarray]:
    """Per-group channel-major stacks of the policy buffers, zeroed outside the group.

    Returns ``{group: array of shape (channels, height, width)}``.
    """
    size = gbuffers.size
    if size is not None and size != (onehot.width, onehot.height):
        raise DimensionMismatch(f"G-buffers are {size}, one-hot mask is {(onehot.width, onehot.height)}")
    bufs = grouping.required_buffers
    h, w = onehot.height, onehot.width
    # one interleaved (pixels, channels) table; each group gathers only its own pixels
    table = np.concatenate([gbuffers[b].data for b in bufs], axis=2).reshape(h * w, -1)
    offsets, start = {}, 0
    for b in bufs:
        n = gbuffers[b].channels
        offsets[b] = np.arange(start, start + n)
        start += n
    masks = onehot.planes.reshape(NUM_GROUPS, -1)
    streams = {}
    for g in range(NUM_GROUPS):
        chans = np.concatenate([offsets[b] for b in grouping.buffer_policy[g]])
        out = np.zeros((len(chans), h * w), np.float32)
        idx = np.flatnonzero(masks[g])
        if len(idx):
            out[:, idx] = table[np.ix_(idx, chans)].T
        out = out.reshape(len(chans), h, w)
        out.flags.writeable = False
        streams[g] = out
    return streams


def resize_bilinear(img: ImagePlane, width: int, height: int) -> ImagePlane:
    """Bilinear resampling with half-pixel centers and edge clamping."""
    if width < 1 or height < 1:
        raise ZeroDimension(f"target size {width}x{height} must be at least 1x1")
    if (width, height) == img.size:
        return img
    src = img.data
    ys, y0, y1 = _sample_axis(img.height, height)
    xs, x0, x1 = _sample_axis(img.width, width)
    wy = ys[:, None, None]
    wx = xs[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return ImagePlane(np.clip(out, 0.0, 1.0).astype(np.float32), img.precision)


def _sample_axis(n_in: int, n_out: int):
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return (pos - lo).astype(np.float32), lo, hi


def resize_nearest(semantics: SemanticMap, width: int, height: int) -> SemanticMap:
    """Nearest-neighbour resampling for label maps (same pixel-center convention)."""
    if width < 1 or height < 1:
        raise ZeroDimension(f"target size {width}x{height} must be at least 1x1")
    if (width, height) == semantics.size:
        return semantics
    ys = np.minimum(((np.arange(height) + 0.5) * semantics.height / height).astype(np.intp), semantics.height - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * semantics.width / width).astype(np.intp), semantics.width - 1)
    return SemanticMap(semantics.class_ids[ys][:, xs])


def check_sizes(sizes: Sequence[tuple[int, int]]):
    if len(set(sizes)) > 1:
        raise DimensionMismatch(f"inconsistent frame dimensions {sorted(set(sizes))}")
