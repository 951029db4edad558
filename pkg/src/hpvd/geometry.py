"""Axis-aligned box algebra and the lesion flagging criterion.

Boxes are half-open intervals in voxel index space with real-valued
corners: a box covers ``x0 <= x < x1`` (and likewise for y, z).  Voxel ``i``
occupies ``[i, i + 1)``, so integer boxes rasterize exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

KINDS = ("HCC", "TACE", "unfiltered")


def _coerce_corners(box) -> tuple:
    """Store corners as plain Python numbers; integral values become ints so
    integer voxel boxes serialize as integers."""
    vals = []
    for name in box.__dataclass_fields__:
        v = float(getattr(box, name))
        v = int(v) if v.is_integer() else v
        object.__setattr__(box, name, v)
        vals.append(v)
    return tuple(vals)


@dataclass(frozen=True)
class Box3:
    x0: float
    y0: float
    z0: float
    x1: float
    y1: float
    z1: float

    def __post_init__(self):
        vals = _coerce_corners(self)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box corner in {vals}")
        if not (self.x0 < self.x1 and self.y0 < self.y1 and self.z0 < self.z1):
            raise ValueError(f"box must have positive extent, got {vals}")

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> "Box3":
        if len(coords) != 6:
            raise ValueError(f"expected 6 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    @classmethod
    def from_center(cls, center: Sequence[float], extent: Sequence[float]) -> "Box3":
        (cx, cy, cz), (ex, ey, ez) = center, extent
        return cls(cx - ex / 2, cy - ey / 2, cz - ez / 2, cx + ex / 2, cy + ey / 2, cz + ez / 2)

    def to_list(self) -> list[float]:
        return [self.x0, self.y0, self.z0, self.x1, self.y1, self.z1]

    @property
    def lo(self) -> tuple[float, float, float]:
        return (self.x0, self.y0, self.z0)

    @property
    def hi(self) -> tuple[float, float, float]:
        return (self.x1, self.y1, self.z1)

    @property
    def extent(self) -> tuple[float, float, float]:
        return (self.x1 - self.x0, self.y1 - self.y0, self.z1 - self.z0)

    @property
    def center(self) -> tuple[float, float, float]:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2, (self.z0 + self.z1) / 2)

    def translate(self, dx: float, dy: float, dz: float) -> "Box3":
        return Box3(self.x0 + dx, self.y0 + dy, self.z0 + dz,
                    self.x1 + dx, self.y1 + dy, self.z1 + dz)

    def contains_point(self, p: Sequence[float]) -> bool:
        return all(lo <= c < hi for lo, c, hi in zip(self.lo, p, self.hi))

    def project_axial(self) -> "Box2":
        return Box2(self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class Box2:
    """Box in the axial (x, y) plane."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = _coerce_corners(self)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box corner in {vals}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"box must have positive extent, got {vals}")

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)

    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains_point(self, p: Sequence[float]) -> bool:
        return self.x0 <= p[0] < self.x1 and self.y0 <= p[1] < self.y1


@dataclass(frozen=True)
class Detection:
    box: Box3
    score: float
    kind: str = "unfiltered"

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown detection kind {self.kind!r}")

    def with_kind(self, kind: str) -> "Detection":
        return Detection(self.box, self.score, kind)

    def to_dict(self) -> dict:
        return {"box": self.box.to_list(), "score": self.score, "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(Box3.from_list(d["box"]), float(d["score"]), d.get("kind", "unfiltered"))


def _overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def volume(b: Box3) -> float:
    ex, ey, ez = b.extent
    return ex * ey * ez


def intersection_volume(a: Box3, b: Box3) -> float:
    return (_overlap(a.x0, a.x1, b.x0, b.x1)
            * _overlap(a.y0, a.y1, b.y0, b.y1)
            * _overlap(a.z0, a.z1, b.z0, b.z1))


def iou3(a: Box3, b: Box3) -> float:
    inter = intersection_volume(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (volume(a) + volume(b) - inter)


def iobb3(pred: Box3, gt: Box3) -> float:
    """Intersection over the predicted box volume (not symmetric)."""
    return intersection_volume(pred, gt) / volume(pred)


def iobb2(pred: Box2, gt: Box2) -> float:
    inter = _overlap(pred.x0, pred.x1, gt.x0, gt.x1) * _overlap(pred.y0, pred.y1, gt.y0, gt.y1)
    return inter / pred.area()


def flag_match(pred: Box3, gt: Box3, tau_iobb: float = 0.3) -> bool:
    """Lesion flagging criterion: pointing game plus IoBB >= ``tau_iobb``."""
    return gt.contains_point(pred.center) and iobb3(pred, gt) >= tau_iobb


def flag_match_2d(pred: Box2, gt3: Box3, tau: float = 0.3) -> bool:
    """Reader-mark criterion against the axial projection of a 3D lesion box."""
    gt = gt3.project_axial()
    return gt.contains_point(pred.center) and iobb2(pred, gt) >= tau


# -- prediction files ---------------------------------------------------------

@dataclass
class StudyPredictions:
    study_id: str
    detections: list[Detection] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        d = {"study_id": self.study_id, "detections": [x.to_dict() for x in self.detections]}
        if self.error is not None:
            d["error"] = self.error
        return d


def dump_predictions(preds: Iterable[StudyPredictions], path: str | Path) -> None:
    payload = [p.to_dict() for p in preds]
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def load_predictions(path: str | Path) -> list[StudyPredictions]:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise ValueError(f"{path}: prediction file must hold a JSON list")
    out = []
    for entry in raw:
        dets = [Detection.from_dict(d) for d in entry.get("detections", [])]
        out.append(StudyPredictions(entry["study_id"], dets, entry.get("error")))
    return out
