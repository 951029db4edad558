"""Peak decoding of center heatmaps into boxes."""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from ..geometry import Box3, Detection
from .model import STRIDE, cell_center


def _squeeze_heat(heatmap: np.ndarray) -> np.ndarray:
    h = np.asarray(heatmap, dtype=np.float64)
    if h.ndim == 4 and h.shape[0] == 1:
        h = h[0]
    if h.ndim != 3:
        raise ValueError(f"heatmap must be (D, H, W) or (1, D, H, W), got shape {h.shape}")
    return h


def local_peaks(heatmap: np.ndarray) -> np.ndarray:
    """Boolean mask of 3x3x3 local maxima.

    A cell is a peak when no neighbour exceeds it; on a plateau only the cell
    with the lowest linear index survives.
    """
    h = _squeeze_heat(heatmap)
    padded = np.pad(h, 1, constant_values=-np.inf)
    d, y, x = h.shape
    peak = np.ones(h.shape, dtype=bool)
    for off in itertools.product((-1, 0, 1), repeat=3):
        if off == (0, 0, 0):
            continue
        nb = padded[1 + off[0]:1 + off[0] + d, 1 + off[1]:1 + off[1] + y, 1 + off[2]:1 + off[2] + x]
        # neighbours later in C order lose ties, earlier ones win them
        peak &= (h >= nb) if off > (0, 0, 0) else (h > nb)
    return peak


def decode(heatmap: np.ndarray, size_map: np.ndarray, k_max: int = 20, score_min: float = 0.01,
           stride: Sequence[int] = STRIDE, log_extent_range=None) -> list[Detection]:
    """Top-``k_max`` heatmap peaks with value >= ``score_min`` as boxes.

    ``size_map`` (3, D, H, W) holds log extents in (x, y, z) voxel order.
    ``log_extent_range``, a ``(lo, hi)`` pair of length-3 arrays, clips them
    before exponentiation.
    """
    h = _squeeze_heat(heatmap)
    size = np.asarray(size_map, dtype=np.float64)
    if size.shape != (3,) + h.shape:
        raise ValueError(f"size map shape {size.shape} does not match heatmap {h.shape}")
    cand = np.flatnonzero(local_peaks(h) & (h >= score_min))
    if cand.size == 0:
        return []
    vals = h.ravel()[cand]
    order = np.lexsort((cand, -vals))[:k_max]
    dets = []
    for lin in cand[order]:
        cell = np.unravel_index(lin, h.shape)
        center = cell_center(cell, stride)
        log_ext = size[(slice(None),) + cell]
        if log_extent_range is not None:
            log_ext = np.clip(log_ext, *log_extent_range)
        extent = np.exp(log_ext)
        score = float(min(max(h[cell], 0.0), 1.0))
        dets.append(Detection(Box3.from_center(center, extent), score))
    return dets
