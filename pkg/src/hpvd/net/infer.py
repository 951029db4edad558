"""Whole-study inference with depth-wise sliding windows."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import PhaseUnavailableError
from ..geometry import Detection
from ..volume import Phase, PhaseStats, Study, normalize, parse_phases, phases_label, sliding_windows, stitch
from .decode import decode
from .model import SIZE_RANGE_KEYS, forward


def _select_phases(study: Study, phases_requested) -> tuple[Phase, ...]:
    phases = study.phases if phases_requested is None else parse_phases(phases_requested)
    missing = [p for p in phases if p not in study.volumes]
    if missing:
        raise PhaseUnavailableError(
            f"study {study.id}: requested {phases_label(phases)} but {phases_label(missing)} "
            f"not present (has {phases_label(study.phases)})")
    return phases


def infer_maps(study: Study, params, state, stats: PhaseStats, phases_requested=None,
               window_depth: int = 48, overlap_depth: int = 16,
               dtype=np.float32) -> tuple[np.ndarray, np.ndarray, list]:
    """Stitched (1, D, H', W') heatmap and (3, D, H', W') size map for a study.

    The in-plane extent is zero padded (in normalized units, i.e. at the phase
    mean) up to a multiple of 8 and the outputs cropped back.  Also returns the
    per-window ``(range, heatmap)`` pairs.
    """
    phases = _select_phases(study, phases_requested)
    arrays = {p: normalize(study.volumes[p], stats).data for p in phases}
    nz, ny, nx = study.shape
    py, px = -ny % 8, -nx % 8
    if py or px:
        arrays = {p: np.pad(a, ((0, 0), (0, py), (0, px))) for p, a in arrays.items()}
    heat_parts, size_parts = [], []
    for s, e in sliding_windows(nz, window_depth, overlap_depth):
        heat, size = forward({p: a[s:e] for p, a in arrays.items()}, params, state, "eval", dtype=dtype)
        heat_parts.append(((s, e), heat))
        size_parts.append(((s, e), size))
    heat = stitch(heat_parts)
    size = stitch(size_parts)
    oy, ox = -(-ny // 4), -(-nx // 4)
    return heat[..., :oy, :ox], size[..., :oy, :ox], heat_parts


def infer_study(study: Study, params, state, stats: PhaseStats, phases_requested=None, *,
                window_depth: int = 48, overlap_depth: int = 16, k_max: int = 20,
                score_min: float = 0.01, dtype=np.float32) -> list[Detection]:
    """Detections in full-volume voxel coordinates from the requested phases.

    Box extents are clipped to the training size range when ``state`` holds it.
    """
    heat, size, _ = infer_maps(study, params, state, stats, phases_requested,
                               window_depth, overlap_depth, dtype)
    bounds = tuple(state[k] for k in SIZE_RANGE_KEYS) if all(k in state for k in SIZE_RANGE_KEYS) else None
    return decode(heat, size, k_max=k_max, score_min=score_min, log_extent_range=bounds)
