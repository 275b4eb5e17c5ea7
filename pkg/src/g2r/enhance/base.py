"""Built-in enhancers, precision emulation and INT8 calibration."""

from __future__ import annotations

import enum
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from g2r.core import EnhancerInput, ImagePlane, Precision
from g2r.errors import G2RError

DEGENERATE_STD = 1e-6
INT8_MAX = 127


class EnhancerKind(enum.Enum):
    Identity = "identity"
    StatsMatch = "stats_match"
    External = "external"


class EnhancerPrecision(enum.Enum):
    F32 = "f32"
    F16emu = "f16emu"
    INT8 = "int8"


class EmptyCalibrationSet(G2RError):
    pass


class InvalidSpec(G2RError):
    pass


class DegenerateChannel(UserWarning):
    """A source channel had (near) zero variance; only its mean was shifted."""


def _parse_enum(cls, value):
    if isinstance(value, cls):
        return value
    text = str(value).strip()
    for member in cls:
        if text.lower() in (member.name.lower(), member.value):
            return member
    raise InvalidSpec(f"unknown {cls.__name__} {value!r}; expected one of {[m.name for m in cls]}")


@dataclass(frozen=True)
class DatasetStats:
    mean: tuple
    std: tuple
    source: str = ""

    def __post_init__(self):
        mean = tuple(float(v) for v in self.mean)
        std = tuple(float(v) for v in self.std)
        if len(mean) != 3 or len(std) != 3:
            raise InvalidSpec("dataset stats need three channel values")
        if not all(0.0 <= m <= 1.0 for m in mean):
            raise InvalidSpec(f"channel means must lie in [0, 1], got {mean}")
        if not all(s > 0.0 for s in std):
            raise InvalidSpec(f"channel stds must be positive, got {std}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def from_images(cls, images: Sequence[ImagePlane], source: str = "") -> "DatasetStats":
        pixels = np.concatenate([np.asarray(im.data, np.float64).reshape(-1, 3) for im in images])
        return cls(tuple(pixels.mean(axis=0)), tuple(np.maximum(pixels.std(axis=0), DEGENERATE_STD)), source)

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetStats":
        return cls(tuple(raw["mean"]), tuple(raw["std"]), str(raw.get("source", "")))

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "source": self.source}


@dataclass(frozen=True)
class CalibrationTable:
    scale: tuple
    zero_point: int = 0

    def __post_init__(self):
        scale = tuple(float(s) for s in self.scale)
        if not scale or not all(s > 0.0 and np.isfinite(s) for s in scale):
            raise InvalidSpec(f"calibration scales must be positive, got {scale}")
        if self.zero_point != 0:
            raise InvalidSpec("only symmetric quantization (zero_point 0) is supported")
        object.__setattr__(self, "scale", scale)

    @classmethod
    def from_dict(cls, raw: dict) -> "CalibrationTable":
        return cls(tuple(raw["scale"]), int(raw.get("zero_point", 0)))

    def to_dict(self) -> dict:
        return {"scale": list(self.scale), "zero_point": self.zero_point}


@dataclass(frozen=True)
class Int8Plane:
    q: np.ndarray  # int8, (h, w, c)
    table: CalibrationTable


@dataclass(frozen=True)
class EnhancerSpec:
    kind: EnhancerKind = EnhancerKind.Identity
    precision: EnhancerPrecision = EnhancerPrecision.F32
    target_stats: DatasetStats | None = None
    external_endpoint: str | None = None
    calibration: CalibrationTable | None = None
    deadline: float = 1.0
    simulated_cost: float = 0.0  # seconds of busy time added per call

    def __post_init__(self):
        object.__setattr__(self, "kind", _parse_enum(EnhancerKind, self.kind))
        object.__setattr__(self, "precision", _parse_enum(EnhancerPrecision, self.precision))
        self.validate()

    def validate(self):
        if self.kind == EnhancerKind.StatsMatch and self.target_stats is None:
            raise InvalidSpec("stats_match enhancer requires target_stats")
        if self.kind == EnhancerKind.External and not self.external_endpoint:
            raise InvalidSpec("external enhancer requires external_endpoint")
        if self.precision == EnhancerPrecision.INT8 and self.calibration is None:
            raise InvalidSpec("INT8 precision requires a calibration table")
        if self.deadline <= 0:
            raise InvalidSpec("deadline must be positive")
        if self.simulated_cost < 0:
            raise InvalidSpec("simulated_cost must be non-negative")


# -- quantization ------------------------------------------------------------------


def calibrate_int8(samples: Sequence[ImagePlane]) -> CalibrationTable:
    """Symmetric per-channel scales: max |x| over the samples divided by 127."""
    if not samples:
        raise EmptyCalibrationSet("calibration needs at least one sample")
    channels = {s.channels for s in samples}
    if len(channels) != 1:
        raise InvalidSpec(f"calibration samples disagree on channel count: {sorted(channels)}")
    peak = np.zeros(channels.pop())
    for s in samples:
        peak = np.maximum(peak, np.abs(s.data).reshape(-1, s.channels).max(axis=0))
    # an all-zero channel gets the unit grid so that scale stays positive
    peak[peak == 0.0] = 1.0
    return CalibrationTable(tuple(float(np.float32(p)) / INT8_MAX for p in peak))


def quantize_array(x: np.ndarray, scale) -> np.ndarray:
    q = np.rint(np.asarray(x, np.float64) / np.asarray(scale, np.float64))
    return np.clip(q, -INT8_MAX, INT8_MAX).astype(np.int8)


def dequantize_array(q: np.ndarray, scale) -> np.ndarray:
    return q.astype(np.float64) * np.asarray(scale, np.float64)


def quantize(img: ImagePlane, table: CalibrationTable) -> Int8Plane:
    if img.channels != len(table.scale):
        raise InvalidSpec(f"table has {len(table.scale)} scales for a {img.channels}-channel image")
    return Int8Plane(quantize_array(img.data, table.scale), table)


def dequantize(plane: Int8Plane, table: CalibrationTable | None = None) -> ImagePlane:
    table = table or plane.table
    return ImagePlane(dequantize_array(plane.q, table.scale).astype(np.float32))


def round_f16(x: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even onto the binary16 grid, returned as float32."""
    return np.asarray(x, np.float32).astype(np.float16).astype(np.float32)


# -- transforms ----------------------------------------------------------------------


def stats_match(img: ImagePlane, target: DatasetStats) -> ImagePlane:
    """Per-channel moment matching towards ``target``, clamped to [0, 1]."""
    if img.channels != 3:
        raise InvalidSpec(f"stats_match needs a 3-channel image, got {img.channels}")
    x = np.asarray(img.data, np.float64)
    flat = x.reshape(-1, 3)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    out = np.empty_like(x)
    for c in range(3):
        if std[c] < DEGENERATE_STD:
            warnings.warn(f"channel {c} has zero variance; applying mean shift only", DegenerateChannel, stacklevel=2)
            out[..., c] = x[..., c] - mean[c] + target.mean[c]
        else:
            out[..., c] = (x[..., c] - mean[c]) / std[c] * target.std[c] + target.mean[c]
    return ImagePlane(np.clip(out, 0.0, 1.0).astype(np.float32), img.precision)


class Enhancer:
    """Callable ``EnhancerInput -> ImagePlane``. Subclasses override ``_apply``."""

    def __init__(self, spec: EnhancerSpec):
        self.spec = spec

    def __call__(self, inp: EnhancerInput) -> ImagePlane:
        start = time.perf_counter()
        rgb = inp.rgb
        precision = self.spec.precision
        if precision == EnhancerPrecision.F16emu:
            rgb = ImagePlane(round_f16(rgb.data), Precision.F16)
        elif precision == EnhancerPrecision.INT8:
            rgb = dequantize(quantize(rgb, self.spec.calibration))
        if rgb is not inp.rgb:
            inp = EnhancerInput(inp.frame_id, rgb, inp.onehot, inp.streams)
        out = self._apply(inp)
        if precision == EnhancerPrecision.F16emu:
            out = ImagePlane(round_f16(out.data), Precision.F16)
        if self.spec.simulated_cost:
            _busy_until(start + self.spec.simulated_cost)
        return out

    def _apply(self, inp: EnhancerInput) -> ImagePlane:
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _busy_until(t_end: float):
    # sleep stands in for accelerator time: it releases the GIL like a real inference call
    remaining = t_end - time.perf_counter()
    if remaining > 0:
        time.sleep(remaining)


class IdentityEnhancer(Enhancer):
    def _apply(self, inp):
        return inp.rgb


class StatsMatchEnhancer(Enhancer):
    def _apply(self, inp):
        return stats_match(inp.rgb, self.spec.target_stats)


def build_enhancer(spec: EnhancerSpec) -> Enhancer:
    if spec.kind == EnhancerKind.Identity:
        return IdentityEnhancer(spec)
    if spec.kind == EnhancerKind.StatsMatch:
        return StatsMatchEnhancer(spec)
    from g2r.enhance.external import ExternalEnhancer

    return ExternalEnhancer(spec)


def enhance(inp: EnhancerInput, spec: EnhancerSpec) -> ImagePlane:
    """One-shot enhancement. Long-running callers should keep a ``build_enhancer`` instance."""
    with build_enhancer(spec) as enhancer:
        return enhancer(inp)


def spec_from_dict(raw: dict) -> EnhancerSpec:
    raw = dict(raw or {})
    stats = raw.get("target_stats")
    calib = raw.get("calibration")
    return EnhancerSpec(
        kind=raw.get("kind", "identity"),
        precision=raw.get("precision", "f32"),
        target_stats=DatasetStats.from_dict(stats) if isinstance(stats, dict) else stats,
        external_endpoint=raw.get("external_endpoint"),
        calibration=CalibrationTable.from_dict(calib) if isinstance(calib, dict) else calib,
        deadline=float(raw.get("deadline", 1.0)),
        simulated_cost=float(raw.get("simulated_cost", 0.0)),
    )
