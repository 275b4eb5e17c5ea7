"""Capture cadence and the per-capture file writers."""

from __future__ import annotations

import io
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from g2r.core import GBufferId, ImagePlane, SemanticMap
from g2r.datagen.boxes import DETECTION_CLASSES, DETECTION_NAMES, write_voc_xml
from g2r.datagen.container import encode_container
from g2r.errors import G2RError

# product -> file suffix; images take the configured extension
PRODUCTS = {
    "frame": "_frame.{ext}",
    "enhanced_frame": "_enhanced.{ext}",
    "semantic": "_semantic.png",
    "depth": "_depth.png",
    "gbuffers": "_gbuffers.g2r",
    "boxes": "_boxes.xml",
    "vehicle_status": "_vehicle.json",
    "world_status": "_world.json",
}
IMAGE_FORMATS = {"png": "PNG", "jpg": "JPEG"}
MANIFEST = "manifest.jsonl"


class CaptureIoError(G2RError):
    fatal = True  # stops the pipeline run


class MissingProduct(G2RError):
    pass


def should_capture(tick: int, every_n: int) -> bool:
    if every_n < 1:
        raise ValueError("every_n must be at least 1")
    return tick % every_n == 0


def capture_count(ticks: int, every_n: int, first_tick: int = 0) -> int:
    """Captures over ticks ``first_tick .. first_tick + ticks - 1``."""
    return sum(1 for t in range(first_tick, first_tick + ticks) if t % every_n == 0)


@dataclass(frozen=True)
class CaptureConfig:
    out_dir: str = "capture"
    every_n: int = 20
    products: frozenset = field(default_factory=lambda: frozenset(PRODUCTS))
    image_format: str = "png"
    min_box_area: int = 16
    occlusion_min_points: int = 1
    detection_classes: tuple = DETECTION_NAMES

    def __post_init__(self):
        if self.every_n < 1:
            raise ValueError("every_n must be at least 1")
        if self.min_box_area < 1:
            raise ValueError("min_box_area must be at least 1")
        if self.occlusion_min_points < 0:
            raise ValueError("occlusion_min_points must be non-negative")
        products = frozenset(self.products)
        unknown = products - PRODUCTS.keys()
        if unknown:
            raise ValueError(f"unknown capture products {sorted(unknown)}; known: {sorted(PRODUCTS)}")
        object.__setattr__(self, "products", products)
        if self.image_format not in IMAGE_FORMATS:
            raise ValueError(f"image_format must be one of {sorted(IMAGE_FORMATS)}")
        bad = set(self.detection_classes) - set(DETECTION_NAMES)
        if bad:
            raise ValueError(f"unknown detection classes {sorted(bad)}")

    @property
    def class_table(self) -> dict:
        return {c: n for c, n in DETECTION_CLASSES.items() if n in self.detection_classes}

    @property
    def stream_extras(self) -> tuple:
        """Wire streams the requested products need beyond the enhancer inputs."""
        extra = []
        if "boxes" in self.products:
            extra += ["instance", "lidar"]
        if self.products & {"vehicle_status", "world_status"}:
            extra.append("vehicle_status")
        return tuple(extra)


def stem(frame_id: int) -> str:
    return f"{frame_id:08d}"


# -- encoders -------------------------------------------------------------------------


def encode_image(plane: ImagePlane, fmt: str = "png") -> bytes:
    data = plane.to_u8()
    img = Image.fromarray(data[:, :, 0] if plane.channels == 1 else data[:, :, :3])
    buf = io.BytesIO()
    if fmt == "jpg":
        img.save(buf, format="JPEG", quality=95)
    else:
        img.save(buf, format="PNG")
    return buf.getvalue()


def encode_semantic(semantics: SemanticMap) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(semantics.class_ids.astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def encode_depth(depth: ImagePlane) -> bytes:
    """16-bit PNG of depth in [0, 1]; quantization error is at most half a step of 1/65535."""
    q = np.rint(np.clip(depth.data[:, :, 0].astype(np.float64), 0.0, 1.0) * 65535).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    return buf.getvalue()


def read_image(path) -> ImagePlane:
    with Image.open(path) as img:
        return ImagePlane.from_u8(np.asarray(img.convert("RGB")))


def read_semantic(path) -> SemanticMap:
    with Image.open(path) as img:
        return SemanticMap(np.asarray(img).astype(np.int64))


def read_depth(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img).astype(np.float64) / 65535.0


def write_status_json(world) -> tuple[str, str]:
    """Vehicle and world status of ``world``'s ego as JSON text."""
    from g2r.mockengine.world import status_records

    vehicle, world_info = status_records(world)
    return json.dumps(vehicle), json.dumps(world_info)


# -- capture --------------------------------------------------------------------------


class Manifest:
    """Append-only JSON-lines index; appends are serialized."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / MANIFEST
        self._lock = threading.Lock()

    def append(self, entry: dict):
        line = json.dumps(entry, sort_keys=True) + "\n"
        with self._lock, open(self.path, "a", encoding="utf-8") as f:
            f.write(line)

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _product_payloads(bundle, enhanced, boxes, cfg: CaptureConfig) -> dict[str, bytes]:
    fmt = cfg.image_format
    out = {}
    want = cfg.products
    name = stem(bundle.frame_id)
    if "frame" in want:
        out["frame"] = encode_image(bundle.rgb, fmt)
    if "enhanced_frame" in want:
        if enhanced is None:
            raise MissingProduct("enhanced frame requested but none was produced")
        if enhanced.size != bundle.rgb.size:
            raise MissingProduct(f"enhanced frame is {enhanced.size}, frame is {bundle.rgb.size}")
        out["enhanced_frame"] = encode_image(enhanced, fmt)
    if "semantic" in want:
        out["semantic"] = encode_semantic(bundle.semantics)
    if "depth" in want:
        if GBufferId.Depth not in bundle.gbuffers:
            raise MissingProduct("depth requested but the bundle has no Depth buffer")
        out["depth"] = encode_depth(bundle.gbuffers[GBufferId.Depth])
    if "gbuffers" in want:
        planes = [(int(b), p.data) for b, p in sorted(bundle.gbuffers.buffers.items())]
        out["gbuffers"] = encode_container(planes, label=f"frame {bundle.frame_id}")
    if "boxes" in want:
        meta = {"filename": name + PRODUCTS["frame"].format(ext=fmt), "width": bundle.rgb.width, "height": bundle.rgb.height}
        out["boxes"] = write_voc_xml(boxes or [], meta)
    if want & {"vehicle_status", "world_status"}:
        if bundle.status is None:
            raise MissingProduct("status requested but the bundle carries no status record")
        if "vehicle_status" in want:
            out["vehicle_status"] = (json.dumps(bundle.status["vehicle"], sort_keys=True) + "\n").encode()
        if "world_status" in want:
            out["world_status"] = (json.dumps(bundle.status["world"], sort_keys=True) + "\n").encode()
    return out


def write_capture(bundle, enhanced, boxes, cfg: CaptureConfig, manifest: Manifest | None = None) -> dict:
    """Write one capture's files and append its manifest line; returns the manifest entry."""
    out_dir = Path(cfg.out_dir)
    payloads = _product_payloads(bundle, enhanced, boxes, cfg)
    name = stem(bundle.frame_id)
    files = {p: name + PRODUCTS[p].format(ext=cfg.image_format) for p in payloads}
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for product in sorted(payloads):
            path = out_dir / files[product]
            path.write_bytes(payloads[product])
            written.append(path)
    except OSError as exc:
        for path in written:
            path.unlink(missing_ok=True)
        raise CaptureIoError(f"writing capture {name} failed: {exc}") from exc
    entry = {
        "frame_id": bundle.frame_id,
        "stem": name,
        "width": bundle.rgb.width,
        "height": bundle.rgb.height,
        "files": files,
        "boxes": len(boxes or []),
    }
    (manifest or Manifest(out_dir)).append(entry)
    return entry
