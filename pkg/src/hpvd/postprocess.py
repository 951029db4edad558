"""Post-processing of raw detections: NMS, liver-mask filter and the
HU-threshold classifier separating TACE-treated from untreated lesions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .errors import PhaseUnavailableError
from .geometry import Box3, Detection, iou3
from .volume import Phase, Study, parse_phases

TACE_PHASE_ORDER = (Phase.NC, Phase.DP, Phase.VP, Phase.AP)


@dataclass(frozen=True)
class PostprocessConfig:
    nms_iou: float = 0.1
    liver_overlap_min: float = 0.30
    tace_hu_threshold: float = 200.0
    tace_fraction: float = 0.01
    tace_phase_order: tuple[Phase, ...] = TACE_PHASE_ORDER

    def __post_init__(self):
        if not 0 <= self.nms_iou <= 1:
            raise ValueError(f"nms_iou must lie in [0, 1], got {self.nms_iou}")
        if not 0 <= self.liver_overlap_min <= 1:
            raise ValueError(f"liver_overlap_min must lie in [0, 1], got {self.liver_overlap_min}")
        if not 0 <= self.tace_fraction < 1:
            raise ValueError(f"tace_fraction must lie in [0, 1), got {self.tace_fraction}")
        if not math.isfinite(self.tace_hu_threshold):
            raise ValueError("tace_hu_threshold must be finite")
        object.__setattr__(self, "tace_phase_order", tuple(Phase(p) for p in self.tace_phase_order))


def nms(dets: Sequence[Detection], iou_thresh: float = 0.1) -> list[Detection]:
    """Greedy NMS: visit by descending score (stable for ties) and drop any box
    whose IoU with an already kept box exceeds ``iou_thresh``."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(iou3(d.box, k.box) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


def voxel_slices(box: Box3, shape: Sequence[int]) -> tuple[slice, slice, slice] | None:
    """Index slices (z, y, x) of voxels whose centers lie in ``box``, clipped to
    an array of ``shape`` (nz, ny, nx).  None if no voxel qualifies."""
    out = []
    for lo, hi, n in zip((box.z0, box.y0, box.x0), (box.z1, box.y1, box.x1), shape):
        a = max(math.ceil(lo - 0.5), 0)
        b = min(math.ceil(hi - 0.5), n)
        if b <= a:
            return None
        out.append(slice(a, b))
    return tuple(out)


def liver_overlap(box: Box3, mask: np.ndarray) -> float:
    sl = voxel_slices(box, mask.shape)
    if sl is None:
        return 0.0
    return float(np.count_nonzero(mask[sl])) / mask[sl].size


def liver_filter(dets: Sequence[Detection], mask: np.ndarray | None,
                 min_overlap: float = 0.30) -> list[Detection]:
    """Keep detections with at least ``min_overlap`` of their (grid-clipped)
    voxels inside the liver mask.  Without a mask everything passes."""
    if mask is None:
        return list(dets)
    mask = np.asarray(mask, dtype=bool)
    return [d for d in dets if liver_overlap(d.box, mask) >= min_overlap]


def select_tace_phase(available: Sequence[Phase], order: Sequence[Phase] = TACE_PHASE_ORDER) -> Phase:
    for p in order:
        if p in available:
            return p
    raise PhaseUnavailableError(f"no phase usable for TACE classification among {list(available)}")


def high_hu_fraction(box: Box3, hu: np.ndarray, threshold: float = 200.0) -> float:
    sl = voxel_slices(box, hu.shape)
    if sl is None:
        return 0.0
    region = hu[sl]
    return float(np.count_nonzero(region > threshold)) / region.size


def tace_classify(det: Detection, study: Study, cfg: PostprocessConfig = PostprocessConfig(),
                  phases: Sequence[Phase] | None = None) -> str:
    """``"TACE"`` if more than ``tace_fraction`` of the box voxels exceed
    ``tace_hu_threshold`` HU in the policy-selected phase, else ``"HCC"``.

    ``phases`` restricts which of the study's phases may be consulted.
    """
    available = study.phases if phases is None else [p for p in parse_phases(phases) if p in study.volumes]
    phase = select_tace_phase(available, cfg.tace_phase_order)
    frac = high_hu_fraction(det.box, study.volumes[phase].data, cfg.tace_hu_threshold)
    return "TACE" if frac > cfg.tace_fraction else "HCC"


@dataclass
class PipelineResult:
    hcc: list[Detection]
    tace: list[Detection]


def pipeline(dets: Sequence[Detection], study: Study, cfg: PostprocessConfig = PostprocessConfig(),
             phases: Sequence[Phase] | None = None) -> PipelineResult:
    """NMS, then the liver filter, then TACE labelling.  Both lists are sorted
    by descending score; only ``hcc`` counts as a finding."""
    kept = liver_filter(nms(dets, cfg.nms_iou), study.liver_mask, cfg.liver_overlap_min)
    hcc, tace = [], []
    for d in kept:
        kind = tace_classify(d, study, cfg, phases)
        (hcc if kind == "HCC" else tace).append(d.with_kind(kind))
    return PipelineResult(hcc, tace)


class LesionPostprocessor(BaseEstimator):
    """Stateless transformer from raw detections to untreated-HCC findings."""

    def __init__(self, nms_iou=0.1, liver_overlap_min=0.30, tace_hu_threshold=200.0, tace_fraction=0.01):
        self.nms_iou = nms_iou
        self.liver_overlap_min = liver_overlap_min
        self.tace_hu_threshold = tace_hu_threshold
        self.tace_fraction = tace_fraction

    @property
    def config(self) -> PostprocessConfig:
        return PostprocessConfig(self.nms_iou, self.liver_overlap_min, self.tace_hu_threshold, self.tace_fraction)

    def fit(self, X=None, y=None):
        return self

    def transform(self, detections: Sequence[Sequence[Detection]], studies: Sequence[Study],
                  phases=None) -> list[PipelineResult]:
        if len(detections) != len(studies):
            raise ValueError(f"{len(detections)} detection lists for {len(studies)} studies")
        cfg = self.config
        return [pipeline(d, s, cfg, phases) for d, s in zip(detections, studies)]
