"""Detection boxes from class masks and the actor-id plane, written as Pascal VOC XML."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass

import numpy as np

from g2r.core import SemanticClass, SemanticMap
from g2r.errors import DimensionMismatch, G2RError

DETECTION_CLASSES = {
    SemanticClass.Pedestrian: "person",
    SemanticClass.Rider: "rider",
    SemanticClass.Car: "vehicle",
    SemanticClass.Truck: "truck",
    SemanticClass.Bus: "bus",
    SemanticClass.Motorcycle: "motorcycle",
    SemanticClass.Bicycle: "bicycle",
    SemanticClass.TrafficLight: "traffic light",
    SemanticClass.TrafficSign: "traffic sign",
}
DETECTION_NAMES = tuple(DETECTION_CLASSES.values())


class FrameIdMismatch(G2RError):
    pass


@dataclass(frozen=True)
class VocRecord:
    class_name: str
    xmin: int
    ymin: int
    xmax: int
    ymax: int
    truncated: bool = False
    occluded: bool = False
    actor_id: int = 0
    pixels: int = 0

    def __post_init__(self):
        if self.class_name not in DETECTION_NAMES:
            raise ValueError(f"{self.class_name!r} is not a detection class")
        if not (0 <= self.xmin <= self.xmax and 0 <= self.ymin <= self.ymax):
            raise ValueError(f"degenerate box {self.box}")

    @property
    def box(self) -> tuple[int, int, int, int]:
        return self.xmin, self.ymin, self.xmax, self.ymax


def generate_boxes(
    stencil: SemanticMap,
    actor_ids: np.ndarray,
    lidar=None,
    *,
    min_box_area: int = 1,
    occlusion_min_points: int = 1,
    classes=DETECTION_CLASSES,
    frame_id: int | None = None,
) -> list[VocRecord]:
    """One box per (detection class, actor) over the pixels that carry both.

    ``min_box_area`` counts visible pixels. With a lidar scan, an actor hit by
    fewer than ``occlusion_min_points`` points is flagged occluded; without
    one, nothing is flagged.
    """
    ids = np.asarray(actor_ids)
    if ids.shape != stencil.class_ids.shape:
        raise DimensionMismatch(f"actor map {ids.shape} vs stencil {stencil.class_ids.shape}")
    if lidar is not None and frame_id is not None and lidar.frame_id != frame_id:
        raise FrameIdMismatch(f"lidar scan is frame {lidar.frame_id}, stencil is frame {frame_id}")
    hits = lidar.hits_per_actor() if lidar is not None else None
    h, w = ids.shape
    records = []
    cls_map = stencil.class_ids
    for cls, name in classes.items():
        mask = (cls_map == cls) & (ids != 0)
        if not mask.any():
            continue
        ys, xs = np.nonzero(mask)
        owners = ids[ys, xs]
        order = np.argsort(owners, kind="stable")
        owners, ys, xs = owners[order], ys[order], xs[order]
        starts = np.flatnonzero(np.r_[True, owners[1:] != owners[:-1]])
        ends = np.r_[starts[1:], len(owners)]
        for s, e in zip(starts, ends):
            count = int(e - s)
            if count < min_box_area:
                continue
            x0, x1 = int(xs[s:e].min()), int(xs[s:e].max())
            y0, y1 = int(ys[s:e].min()), int(ys[s:e].max())
            actor = int(owners[s])
            records.append(
                VocRecord(
                    name,
                    x0,
                    y0,
                    x1,
                    y1,
                    truncated=x0 == 0 or y0 == 0 or x1 == w - 1 or y1 == h - 1,
                    occluded=hits is not None and hits.get(actor, 0) < occlusion_min_points,
                    actor_id=actor,
                    pixels=count,
                )
            )
    records.sort(key=lambda r: (r.actor_id, r.class_name))
    return records


def write_voc_xml(records, image_meta: dict) -> bytes:
    """Pascal VOC annotation; boxes are written 1-based and inclusive."""
    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = str(image_meta.get("folder", "g2r"))
    ET.SubElement(root, "filename").text = str(image_meta.get("filename", ""))
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(int(image_meta["width"]))
    ET.SubElement(size, "height").text = str(int(image_meta["height"]))
    ET.SubElement(size, "depth").text = str(int(image_meta.get("depth", 3)))
    ET.SubElement(root, "segmented").text = "1"
    for r in records:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = r.class_name
        ET.SubElement(obj, "pose").text = "Unspecified"
        ET.SubElement(obj, "truncated").text = str(int(r.truncated))
        ET.SubElement(obj, "occluded").text = str(int(r.occluded))
        ET.SubElement(obj, "difficult").text = str(int(r.occluded))
        box = ET.SubElement(obj, "bndbox")
        for tag, value in zip(("xmin", "ymin", "xmax", "ymax"), r.box):
            ET.SubElement(box, tag).text = str(value + 1)
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="utf-8", xml_declaration=True) + b"\n"


def read_voc_xml(data: bytes) -> tuple[dict, list[VocRecord]]:
    """Inverse of ``write_voc_xml`` (actor ids are not stored and come back as 0)."""
    root = ET.fromstring(data)
    size = root.find("size")
    meta = {
        "filename": root.findtext("filename", ""),
        "width": int(size.findtext("width")),
        "height": int(size.findtext("height")),
        "depth": int(size.findtext("depth")),
    }
    records = []
    for obj in root.findall("object"):
        box = obj.find("bndbox")
        coords = [int(box.findtext(t)) - 1 for t in ("xmin", "ymin", "xmax", "ymax")]
        records.append(
            VocRecord(
                obj.findtext("name"),
                *coords,
                truncated=obj.findtext("truncated") == "1",
                occluded=obj.findtext("occluded", obj.findtext("difficult")) == "1",
            )
        )
    return meta, records
