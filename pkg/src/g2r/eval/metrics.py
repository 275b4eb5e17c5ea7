"""Segmentation IoU and feature-set cosine similarity."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from g2r.core import NUM_CLASSES, SemanticMap
from g2r.errors import DimensionMismatch, G2RError

MEAN_CONVENTION = "classes absent from both maps are undefined and excluded from the mean"


class ZeroVector(G2RError):
    def __init__(self, index: int, which: str):
        super().__init__(f"vector {index} of set {which!r} has zero norm")
        self.index = index
        self.which = which


@dataclass
class IouReport:
    per_class: dict  # class id -> IoU, or None when absent from both maps
    counts: dict  # class id -> (intersection, union) pixel counts
    mean_iou: float | None

    def to_dict(self) -> dict:
        return {
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "counts": {str(c): list(v) for c, v in self.counts.items()},
            "mean_iou": self.mean_iou,
            "convention": MEAN_CONVENTION,
        }


def _report(inter: np.ndarray, union: np.ndarray, classes) -> IouReport:
    per_class, counts = {}, {}
    for c in classes:
        i, u = int(inter[c]), int(union[c])
        counts[c] = (i, u)
        per_class[c] = i / u if u else None
    defined = [v for v in per_class.values() if v is not None]
    return IouReport(per_class, counts, float(np.mean(defined)) if defined else None)


def _counts(pred: np.ndarray, gt: np.ndarray, n: int):
    p = pred.ravel().astype(np.int64)
    g = gt.ravel().astype(np.int64)
    inter = np.bincount(p[p == g], minlength=n)
    union = np.bincount(p, minlength=n) + np.bincount(g, minlength=n) - inter
    return inter, union


def iou(pred: SemanticMap, gt: SemanticMap, classes=range(NUM_CLASSES)) -> IouReport:
    """Per-class IoU = |pred==c and gt==c| / |pred==c or gt==c|."""
    if pred.size != gt.size:
        raise DimensionMismatch(f"prediction is {pred.size}, ground truth is {gt.size}")
    classes = list(classes)
    n = max([NUM_CLASSES, 256] + [c + 1 for c in classes])
    inter, union = _counts(pred.class_ids, gt.class_ids, n)
    return _report(inter, union, classes)


@dataclass
class DatasetIou:
    frames: int
    frame_mean_iou: float | None  # average of per-frame mean IoU
    pooled: IouReport  # counts summed over all frames
    per_frame: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "frame_mean_iou": self.frame_mean_iou,
            "pooled": self.pooled.to_dict(),
            "per_frame": self.per_frame,
        }


def iou_dirs(pred_dir, gt_dir, classes=range(NUM_CLASSES), pattern="*.png") -> DatasetIou:
    """IoU over label images paired by file name."""
    from g2r.datagen.writer import read_semantic

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    names = sorted(p.name for p in gt_dir.glob(pattern))
    if not names:
        raise FileNotFoundError(f"no {pattern} files in {gt_dir}")
    missing = [n for n in names if not (pred_dir / n).exists()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} ground-truth files have no prediction, e.g. {missing[0]}")
    classes = list(classes)
    inter = np.zeros(256, np.int64)
    union = np.zeros(256, np.int64)
    per_frame = {}
    for name in names:
        pred, gt = read_semantic(pred_dir / name), read_semantic(gt_dir / name)
        if pred.size != gt.size:
            raise DimensionMismatch(f"{name}: prediction is {pred.size}, ground truth is {gt.size}")
        i, u = _counts(pred.class_ids, gt.class_ids, 256)
        inter += i
        union += u
        per_frame[name] = _report(i, u, classes).mean_iou
    means = [v for v in per_frame.values() if v is not None]
    return DatasetIou(len(names), float(np.mean(means)) if means else None, _report(inter, union, classes), per_frame)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    vectors: np.ndarray  # N x D
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DimensionMismatch(f"feature set must be a non-empty N x D matrix, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError(f"feature set {self.label!r} contains NaN or infinite values")
        object.__setattr__(self, "vectors", v)

    @classmethod
    def load(cls, path) -> "FeatureSet":
        """``.g2r`` feature container, or ``.npy`` as a convenience."""
        path = Path(path)
        if path.suffix == ".npy":
            return cls(np.load(path), path.stem)
        from g2r.datagen.container import read_matrix

        matrix, label = read_matrix(path)
        return cls(matrix, label or path.stem)


def _unit_rows(vectors: np.ndarray, which: str) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroVector(int(zero[0]), which)
    return vectors / norms[:, None]


def cosine_matrix(a: FeatureSet, b: FeatureSet) -> np.ndarray:
    if a.vectors.shape[1] != b.vectors.shape[1]:
        raise DimensionMismatch(f"feature dimensions differ: {a.vectors.shape[1]} vs {b.vectors.shape[1]}")
    sims = _unit_rows(a.vectors, a.label or "a") @ _unit_rows(b.vectors, b.label or "b").T
    return np.clip(sims, -1.0, 1.0)


def cosine_pairwise(a: FeatureSet, b: FeatureSet) -> float:
    """Mean cosine similarity over all cross pairs."""
    return float(cosine_matrix(a, b).mean())
