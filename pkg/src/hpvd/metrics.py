"""FROC and LROC analysis with nonparametric LROC-AUC inference.

The LROC AUC estimator and its variance follow the structural-component
(DeLong-style) construction generalized to localization: a target study
contributes to the area only if its top-scoring finding localizes a lesion.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box2, Box3, Detection, StudyPredictions, flag_match, flag_match_2d, iobb2, iobb3
from .volume import Study

Z95 = 1.959963984540054


@dataclass
class StudyEval:
    study_id: str
    gt_hcc: list[Box3] = field(default_factory=list)
    gt_tace: list[Box3] = field(default_factory=list)
    detections: list[Detection] = field(default_factory=list)

    @property
    def is_target(self) -> bool:
        return bool(self.gt_hcc)

    @classmethod
    def from_study(cls, study: Study, detections: Sequence[Detection]) -> "StudyEval":
        return cls(study.id, study.boxes("HCC"), study.boxes("TACE"), list(detections))


def build_evals(studies: Sequence[Study], predictions: Sequence[StudyPredictions]) -> list[StudyEval]:
    """Pair studies with predictions by id, in study order."""
    by_id = {p.study_id: p for p in predictions}
    missing = [s.id for s in studies if s.id not in by_id]
    if missing:
        raise ValueError(f"no predictions for studies {missing[:5]}{'...' if len(missing) > 5 else ''}")
    return [StudyEval.from_study(s, by_id[s.id].detections) for s in studies]


@dataclass
class StudyMatch:
    labels: list[tuple[str, int | None]]   # per detection: ("TP", lesion) | ("FP", None) | ("TACE", None)
    detected: list[bool]                   # per gt_hcc lesion
    hits: list[list[int]]                  # per detection: every gt_hcc lesion it flags


def _criterion(mode: str, tau: float):
    if mode == "3d":
        return (lambda box, gt: flag_match(box, gt, tau)), iobb3
    if mode == "2d":
        return ((lambda box, gt: flag_match_2d(box.project_axial(), gt, tau)),
                (lambda box, gt: iobb2(box.project_axial(), gt.project_axial())))
    raise ValueError(f"matching mode must be '3d' or '2d', got {mode!r}")


def match_study(e: StudyEval, tau_iobb: float = 0.3, mode: str = "3d") -> StudyMatch:
    """Label each detection TP (with the flagged lesion of highest IoBB), FP, or
    TACE-ignored (flags only treated lesions), and mark lesions detected."""
    flags, overlap = _criterion(mode, tau_iobb)
    labels, all_hits = [], []
    detected = [False] * len(e.gt_hcc)
    for d in e.detections:
        hits = [i for i, gt in enumerate(e.gt_hcc) if flags(d.box, gt)]
        all_hits.append(hits)
        if hits:
            for i in hits:
                detected[i] = True
            best = max(hits, key=lambda i: (overlap(d.box, e.gt_hcc[i]), -i))
            labels.append(("TP", best))
        elif any(flags(d.box, gt) for gt in e.gt_tace):
            labels.append(("TACE", None))
        else:
            labels.append(("FP", None))
    return StudyMatch(labels, detected, all_hits)


# -- FROC ---------------------------------------------------------------------

@dataclass
class FrocCurve:
    thresholds: np.ndarray
    fps_per_study: np.ndarray
    sensitivity: np.ndarray
    n_lesions: int
    n_studies: int

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fps_per_study.tolist(), self.sensitivity.tolist()))

    def truncated(self, max_fps: float = 1.0) -> "FrocCurve":
        keep = self.fps_per_study <= max_fps
        return FrocCurve(self.thresholds[keep], self.fps_per_study[keep], self.sensitivity[keep],
                         self.n_lesions, self.n_studies)


def froc(evals: Sequence[StudyEval], tau_iobb: float = 0.3, mode: str = "3d") -> FrocCurve:
    """Sensitivity and FPs/study at every distinct detection score, thresholds
    descending (a detection is kept when its score >= threshold)."""
    if not evals:
        raise ValueError("FROC needs at least one study")
    n_lesions = sum(len(e.gt_hcc) for e in evals)
    if n_lesions == 0:
        raise ValueError("FROC needs at least one ground-truth lesion")
    fp_scores: list[float] = []
    # score at which each lesion first becomes detected (max over flagging detections)
    lesion_scores: list[float] = []
    for e in evals:
        m = match_study(e, tau_iobb, mode)
        best = [-math.inf] * len(e.gt_hcc)
        for d, (lab, _), hits in zip(e.detections, m.labels, m.hits):
            if lab == "FP":
                fp_scores.append(d.score)
            for i in hits:
                best[i] = max(best[i], d.score)
        lesion_scores.extend(best)
    all_scores = sorted({d.score for e in evals for d in e.detections}, reverse=True)
    fp = np.sort(np.asarray(fp_scores))
    ls = np.sort(np.asarray(lesion_scores))
    th = np.asarray(all_scores, dtype=np.float64)
    n_fp = fp.size - np.searchsorted(fp, th, side="left")
    n_det = ls.size - np.searchsorted(ls, th, side="left")
    return FrocCurve(th, n_fp / len(evals), n_det / n_lesions, n_lesions, len(evals))


def sensitivity_at(curve: FrocCurve, fps_target: float = 0.125) -> float:
    """Step-function reading: best sensitivity among thresholds with
    FPs/study <= ``fps_target``; 0 when none qualifies."""
    ok = curve.fps_per_study <= fps_target
    return float(curve.sensitivity[ok].max()) if ok.any() else 0.0


# -- LROC ---------------------------------------------------------------------

def top1(evals: Sequence[StudyEval], tau_iobb: float = 0.3,
         mode: str = "3d") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-study top score (-inf when no finding), localization bit, and target flag."""
    flags, _ = _criterion(mode, tau_iobb)
    scores, local, target = [], [], []
    for e in evals:
        if e.detections:
            best = max(e.detections, key=lambda d: d.score)
            scores.append(best.score)
            local.append(any(flags(best.box, gt) for gt in e.gt_hcc))
        else:
            scores.append(-math.inf)
            local.append(False)
        target.append(e.is_target)
    return np.asarray(scores, dtype=np.float64), np.asarray(local), np.asarray(target)


@dataclass
class LrocCurve:
    thresholds: np.ndarray
    one_minus_specificity: np.ndarray
    tplr: np.ndarray

    def area(self) -> float:
        """Trapezoidal area under the curve."""
        x, y = self.one_minus_specificity, self.tplr
        return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2))


def _split_cohort(evals, tau_iobb, mode):
    s, loc, tgt = top1(evals, tau_iobb, mode)
    n_t, n_c = int(tgt.sum()), int((~tgt).sum())
    if n_t == 0 or n_c == 0:
        raise ValueError(f"LROC needs target and control studies (got {n_t} targets, {n_c} controls)")
    return s[tgt], loc[tgt].astype(np.float64), s[~tgt]


def lroc_from_scores(target_scores, localized, control_scores) -> LrocCurve:
    ts = np.asarray(target_scores, dtype=np.float64)
    loc = np.asarray(localized, dtype=bool)
    cs = np.asarray(control_scores, dtype=np.float64)
    th = np.unique(np.concatenate([ts, cs]))[::-1]
    thresholds = np.concatenate([[math.inf], th])
    tplr = np.array([np.count_nonzero(loc & (ts >= t)) for t in thresholds]) / ts.size
    fpf = np.array([np.count_nonzero(cs >= t) for t in thresholds]) / cs.size
    return LrocCurve(thresholds, fpf, tplr)


def lroc(evals: Sequence[StudyEval], tau_iobb: float = 0.3, mode: str = "3d") -> LrocCurve:
    """LROC curve from each study's highest-confidence finding, starting at the
    (0, 0) point of an infinite threshold."""
    return lroc_from_scores(*_split_cohort(evals, tau_iobb, mode))


@dataclass
class AucEstimate:
    auc: float
    variance: float
    ci95: tuple[float, float]
    n_target: int
    n_control: int

    def to_dict(self) -> dict:
        return {"auc": self.auc, "var": self.variance, "ci95": list(self.ci95),
                "n_t": self.n_target, "n_c": self.n_control}


def _psi(ts: np.ndarray, cs: np.ndarray) -> np.ndarray:
    diff = ts[:, None] - cs[None, :]
    out = (diff > 0).astype(np.float64)
    out[ts[:, None] == cs[None, :]] = 0.5
    return out


def structural_components(target_scores, localized, control_scores) -> tuple[float, np.ndarray, np.ndarray]:
    """LROC AUC plus its per-target (v) and per-control (w) components."""
    ts = np.asarray(target_scores, dtype=np.float64)
    loc = np.asarray(localized, dtype=np.float64)
    cs = np.asarray(control_scores, dtype=np.float64)
    kernel = loc[:, None] * _psi(ts, cs)
    # 2 * kernel is integral, so one division gives the correctly rounded area
    half_counts = int(np.rint(2 * kernel).sum())
    auc = half_counts / (2 * kernel.size) if kernel.size else float("nan")
    return auc, kernel.mean(axis=1), kernel.mean(axis=0)


def auc_from_scores(target_scores, localized, control_scores) -> AucEstimate:
    auc, v, w = structural_components(target_scores, localized, control_scores)
    n_t, n_c = v.size, w.size
    if n_t < 2 or n_c < 2:
        raise ValueError(f"variance needs >= 2 studies per arm (got {n_t} targets, {n_c} controls)")
    var = float(np.var(v, ddof=1) / n_t + np.var(w, ddof=1) / n_c)
    half = Z95 * math.sqrt(var)
    return AucEstimate(auc, var, (max(0.0, auc - half), min(1.0, auc + half)), n_t, n_c)


def auc_lroc(evals: Sequence[StudyEval], tau_iobb: float = 0.3, mode: str = "3d") -> AucEstimate:
    return auc_from_scores(*_split_cohort(evals, tau_iobb, mode))


@dataclass
class Comparison:
    delta: float
    z: float
    p: float
    variance: float

    def to_dict(self) -> dict:
        return {"delta": self.delta, "z": self.z, "p": self.p, "var": self.variance}


def normal_two_sided_p(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def compare_from_scores(a: tuple, b: tuple) -> Comparison:
    """Paired comparison of two (target_scores, localized, control_scores)
    triples over the same studies."""
    auc_a, v_a, w_a = structural_components(*a)
    auc_b, v_b, w_b = structural_components(*b)
    n_t, n_c = v_a.size, w_a.size
    if n_t < 2 or n_c < 2:
        raise ValueError("paired comparison needs >= 2 studies per arm")
    var = float(np.var(v_a - v_b, ddof=1) / n_t + np.var(w_a - w_b, ddof=1) / n_c)
    delta = auc_a - auc_b
    if var > 0:
        z = delta / math.sqrt(var)
    else:
        z = 0.0 if delta == 0 else math.copysign(math.inf, delta)
    return Comparison(delta, z, normal_two_sided_p(z), var)


def compare_auc_paired(evals_a: Sequence[StudyEval], evals_b: Sequence[StudyEval],
                       tau_iobb: float = 0.3, mode: str = "3d") -> Comparison:
    ids_a = [e.study_id for e in evals_a]
    ids_b = [e.study_id for e in evals_b]
    if ids_a != ids_b:
        raise ValueError("paired comparison needs the same studies in the same order")
    if [e.is_target for e in evals_a] != [e.is_target for e in evals_b]:
        raise ValueError("study target/control status differs between the two inputs")
    return compare_from_scores(_split_cohort(evals_a, tau_iobb, mode),
                               _split_cohort(evals_b, tau_iobb, mode))


def bonferroni(p_values: Sequence[float], m: int | None = None) -> list[float]:
    p = [float(x) for x in p_values]
    m = len(p) if m is None else int(m)
    if any(not (0.0 <= x <= 1.0) for x in p):
        raise ValueError(f"p-values must lie in [0, 1], got {p}")
    if m < len(p) or m < 1:
        raise ValueError(f"m = {m} is smaller than the number of tests ({len(p)})")
    return [min(1.0, m * x) for x in p]


# -- report files -------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_froc_csv(curve: FrocCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fps_per_study", "sensitivity"])
        for t, f, s in curve.points():
            w.writerow([_fmt(t), _fmt(f), _fmt(s)])


def write_lroc_csv(curve: LrocCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "one_minus_specificity", "tplr"])
        for t, x, y in zip(curve.thresholds, curve.one_minus_specificity, curve.tplr):
            w.writerow([_fmt(t), _fmt(x), _fmt(y)])


def write_json(payload: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True, allow_nan=True) + "\n")
