"""Frame bundles, the frame-id join and the per-lane preprocessing steps."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

import numpy as np

from g2r.core import (
    ClassGrouping,
    EnhancerInput,
    GBufferId,
    GBufferSet,
    ImagePlane,
    OneHotStack,
    SemanticMap,
    check_sizes,
    group_semantic_map,
    resize_bilinear,
    resize_nearest,
    stack_filtered_gbuffers,
)
from g2r.wire.codec import Message, Sensor, array_from_message, message_plane
from g2r.wire.transport import stream_key, stream_name

RGB_KEY = (Sensor.Rgb, None)
STENCIL_KEY = (Sensor.Stencil, None)
INSTANCE_KEY = (Sensor.Instance, None)
LIDAR_KEY = (Sensor.Lidar, None)
STATUS_KEY = (Sensor.VehicleStatus, None)

LANES = ("rgb", "gbuffer", "label")


def should_infer(tick_index: int, skip: int) -> bool:
    return tick_index % (skip + 1) == 0


def required_streams(grouping: ClassGrouping, extra: Iterable[str] = ()) -> list[str]:
    """Streams the enhancer needs for ``grouping``, plus any ``extra`` ones, in wire order."""
    keys = {RGB_KEY, STENCIL_KEY}
    keys.update((Sensor.GBuffer, b) for b in grouping.required_buffers)
    keys.update(stream_key(s) for s in extra)
    return [stream_name(k) for k in sorted(keys, key=lambda k: (k[0], -1 if k[1] is None else k[1]))]


def lane_of(key) -> str:
    sensor = key[0]
    if sensor == Sensor.Rgb:
        return "rgb"
    if sensor == Sensor.GBuffer:
        return "gbuffer"
    return "label"


@dataclass(frozen=True, eq=False)
class FrameBundle:
    """Everything the engine produced for one frame, as received (not resized)."""

    frame_id: int
    rgb: ImagePlane
    gbuffers: GBufferSet
    semantics: SemanticMap
    instance: np.ndarray | None = None
    lidar: bytes | None = None
    status: dict | None = None
    source_ids: Mapping[str, int] = field(default_factory=dict)

    @property
    def mixed_ids(self) -> bool:
        return len(set(self.source_ids.values()) | {self.frame_id}) > 1


@dataclass(frozen=True, eq=False)
class Part:
    """One preprocessed constituent: the decoded original plus its lane output."""

    key: tuple
    frame_id: int
    original: Any
    processed: Any = None


# -- lanes -----------------------------------------------------------------------


def prep_rgb(plane: ImagePlane, target_res) -> ImagePlane:
    return plane if target_res is None else resize_bilinear(plane, *target_res)


def prep_gbuffer(plane: ImagePlane, target_res) -> ImagePlane:
    return plane if target_res is None else resize_bilinear(plane, *target_res)


def prep_labels(semantics: SemanticMap, grouping: ClassGrouping, target_res) -> tuple[SemanticMap, OneHotStack]:
    if target_res is not None:
        semantics = resize_nearest(semantics, *target_res)
    return semantics, group_semantic_map(semantics, grouping)


def decode_part(msg: Message, grouping: ClassGrouping, target_res) -> Part:
    """Lane work for one message: decode, then resize/encode as the data type requires."""
    key = msg.stream_key
    sensor = key[0]
    if sensor == Sensor.Rgb:
        plane = message_plane(msg)
        return Part(key, msg.frame_id, plane, prep_rgb(plane, target_res))
    if sensor == Sensor.GBuffer:
        plane = message_plane(msg)
        processed = prep_gbuffer(plane, target_res) if key[1] in grouping.required_buffers else None
        return Part(key, msg.frame_id, plane, processed)
    if sensor == Sensor.Stencil:
        semantics = SemanticMap(array_from_message(msg)[:, :, 0])
        return Part(key, msg.frame_id, semantics, prep_labels(semantics, grouping, target_res))
    if sensor == Sensor.Instance:
        return Part(key, msg.frame_id, array_from_message(msg)[:, :, 0])
    if sensor == Sensor.VehicleStatus:
        return Part(key, msg.frame_id, json.loads(msg.payload))
    return Part(key, msg.frame_id, bytes(msg.payload))


def assemble_input(
    frame_id: int, rgb: ImagePlane, gbuffers: Mapping, onehot: OneHotStack, grouping: ClassGrouping
) -> EnhancerInput:
    gset = GBufferSet(frame_id, {b: gbuffers[b] for b in grouping.required_buffers if b in gbuffers})
    check_sizes([rgb.size, (onehot.width, onehot.height)] + ([gset.size] if gset.size else []))
    return EnhancerInput(frame_id, rgb, onehot, stack_filtered_gbuffers(gset, onehot, grouping))


def build_bundle(frame_id: int, parts: Mapping, grouping: ClassGrouping) -> tuple[FrameBundle, EnhancerInput]:
    """Join parts of one frame into the original bundle and the enhancer input."""
    rgb = parts[RGB_KEY]
    stencil = parts[STENCIL_KEY]
    gparts = {k[1]: p for k, p in parts.items() if k[0] == Sensor.GBuffer}
    bundle = FrameBundle(
        frame_id,
        rgb.original,
        GBufferSet(frame_id, {g: p.original for g, p in gparts.items()}),
        stencil.original,
        instance=parts[INSTANCE_KEY].original if INSTANCE_KEY in parts else None,
        lidar=parts[LIDAR_KEY].original if LIDAR_KEY in parts else None,
        status=parts[STATUS_KEY].original if STATUS_KEY in parts else None,
        source_ids={stream_name(k): p.frame_id for k, p in parts.items()},
    )
    _, onehot = stencil.processed
    processed = {g: p.processed for g, p in gparts.items() if p.processed is not None}
    return bundle, assemble_input(frame_id, rgb.processed, processed, onehot, grouping)


def preprocess_bundle(bundle: FrameBundle, grouping: ClassGrouping, target_res=None) -> EnhancerInput:
    """Resize, group the labels and stack the filtered G-buffers of one bundle."""
    sizes = [bundle.rgb.size, bundle.semantics.size] + ([bundle.gbuffers.size] if bundle.gbuffers.size else [])
    check_sizes(sizes)
    if target_res is not None and tuple(target_res) == bundle.rgb.size:
        target_res = None
    rgb = prep_rgb(bundle.rgb, target_res)
    _, onehot = prep_labels(bundle.semantics, grouping, target_res)
    gbuffers = {b: prep_gbuffer(bundle.gbuffers[b], target_res) for b in grouping.required_buffers}
    return assemble_input(bundle.frame_id, rgb, gbuffers, onehot, grouping)


# -- join ------------------------------------------------------------------------------


class BundleAssembler:
    """Joins parts by frame id and releases complete frames in ascending order.

    Frames are expected every ``step`` ids starting from the first clock
    value. The next expected frame is released once complete; if it is still
    incomplete (or absent) when the clock is more than ``window`` frames past
    it, it is dropped. Parts for frames already released or dropped are
    rejected, so each frame is released at most once.
    """

    def __init__(self, required: Iterable, window: int = 4, step: int = 1):
        self.required = frozenset(required)
        if not self.required:
            raise ValueError("assembler needs at least one required stream")
        if step < 1 or window < 0:
            raise ValueError("step must be >= 1 and window >= 0")
        self.window = window
        self.step = step
        self._pending: dict[int, dict] = {}
        self._lock = threading.Lock()
        self.next_expected: int | None = None
        self.newest_emitted = -1
        self.emitted = 0
        self.dropped_incomplete = 0
        self.rejected = 0

    def add(self, part: Part) -> bool:
        with self._lock:
            if part.key not in self.required or part.frame_id % self.step:
                self.rejected += 1
                return False
            if self.next_expected is not None and part.frame_id < self.next_expected:
                self.rejected += 1
                return False
            parts = self._pending.setdefault(part.frame_id, {})
            if part.key in parts:
                self.rejected += 1
                return False
            parts[part.key] = part
            return True

    def _complete(self, frame_id) -> bool:
        parts = self._pending.get(frame_id)
        return parts is not None and parts.keys() >= self.required

    def advance(self, clock: int) -> list[tuple[int, dict]]:
        """Release what can be released now that the engine has reached ``clock``."""
        with self._lock:
            if self.next_expected is None:
                first = min([clock] + list(self._pending))
                self.next_expected = -(-first // self.step) * self.step
            out = []
            while self.next_expected <= clock:
                fid = self.next_expected
                if self._complete(fid):
                    out.append(self._release(fid))
                elif clock - fid > self.window:
                    self._pending.pop(fid, None)
                    self.dropped_incomplete += 1
                else:
                    break
                self.next_expected = fid + self.step
            return out

    def drain(self) -> list[tuple[int, dict]]:
        """Release every complete frame and drop the rest (end of stream)."""
        with self._lock:
            out = []
            for fid in sorted(self._pending):
                if self._complete(fid):
                    out.append(self._release(fid))
                else:
                    self.dropped_incomplete += 1
            self._pending.clear()
            if out:
                self.next_expected = out[-1][0] + self.step
            return out

    def _release(self, frame_id):
        parts = self._pending.pop(frame_id)
        self.newest_emitted = frame_id
        self.emitted += 1
        return frame_id, parts

    @property
    def pending(self) -> int:
        return len(self._pending)
