"""Multi-phase CT volumes: data model, file I/O, resampling, normalization,
cropping and depth-wise sliding-window stitching.

Arrays are stored ``(nz, ny, nx)`` in C order, i.e. x varies fastest, which
is also the on-disk layout.  ``dims`` always means ``(nx, ny, nz)``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DimsMismatchError, ManifestError, MissingFileError
from .geometry import Box3


class Phase(str, enum.Enum):
    NC = "NC"
    AP = "AP"
    VP = "VP"
    DP = "DP"

    @property
    def index(self) -> int:
        return _PHASE_INDEX[self]


PHASES = (Phase.NC, Phase.AP, Phase.VP, Phase.DP)
_PHASE_INDEX = {p: i for i, p in enumerate(PHASES)}


def parse_phases(text: str | Sequence[str | Phase]) -> tuple[Phase, ...]:
    """Parse ``"NC,VP"`` (or a sequence) into a canonical, duplicate-free tuple."""
    items = text.split(",") if isinstance(text, str) else list(text)
    try:
        phases = {Phase(str(getattr(p, "value", p)).strip().upper()) for p in items if str(p).strip()}
    except ValueError as exc:
        raise ValueError(f"invalid phase in {text!r}; expected subset of NC,AP,VP,DP") from exc
    if not phases:
        raise ValueError("phase subset must be nonempty")
    return tuple(sorted(phases, key=lambda p: p.index))


def phases_label(phases: Sequence[Phase]) -> str:
    return "+".join(p.value for p in sorted(phases, key=lambda p: p.index))


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 5.0)
    phase: Phase | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be a nonempty 3D array, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.phase is not None:
            self.phase = Phase(self.phase)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)


@dataclass
class LesionAnnotation:
    box: Box3
    kind: str

    def __post_init__(self):
        if self.kind not in ("HCC", "TACE"):
            raise ValueError(f"lesion kind must be HCC or TACE, got {self.kind!r}")


@dataclass
class Study:
    id: str
    volumes: dict[Phase, Volume]
    liver_mask: np.ndarray | None = None
    lesions: list[LesionAnnotation] = field(default_factory=list)

    def __post_init__(self):
        if not self.volumes:
            raise ValueError(f"study {self.id}: at least one phase is required")
        self.volumes = {Phase(p): v for p, v in sorted(self.volumes.items(), key=lambda kv: Phase(kv[0]).index)}
        ref = next(iter(self.volumes.values()))
        for p, v in self.volumes.items():
            if v.dims != ref.dims or v.spacing != ref.spacing:
                raise DimsMismatchError(
                    f"study {self.id}: phase {p.value} has dims {v.dims}/spacing {v.spacing}, "
                    f"expected {ref.dims}/{ref.spacing}")
        if self.liver_mask is not None:
            self.liver_mask = np.asarray(self.liver_mask).astype(bool)
            if self.liver_mask.shape != ref.data.shape:
                raise DimsMismatchError(
                    f"study {self.id}: liver mask shape {self.liver_mask.shape} != {ref.data.shape}")

    @property
    def phases(self) -> tuple[Phase, ...]:
        return tuple(self.volumes)

    @property
    def dims(self) -> tuple[int, int, int]:
        return next(iter(self.volumes.values())).dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return next(iter(self.volumes.values())).spacing

    @property
    def shape(self) -> tuple[int, int, int]:
        return next(iter(self.volumes.values())).data.shape

    def boxes(self, kind: str) -> list[Box3]:
        return [les.box for les in self.lesions if les.kind == kind]


@dataclass
class PhaseStats:
    """Per-phase HU mean and standard deviation."""

    mean: dict[Phase, float]
    std: dict[Phase, float]

    def __post_init__(self):
        self.mean = {Phase(k): float(v) for k, v in self.mean.items()}
        self.std = {Phase(k): float(v) for k, v in self.std.items()}
        for p, s in self.std.items():
            if not s > 0:
                raise ValueError(f"std for phase {p.value} must be positive, got {s}")

    def to_dict(self) -> dict:
        return {p.value: [self.mean[p], self.std[p]] for p in PHASES if p in self.mean}

    @classmethod
    def from_dict(cls, d: Mapping[str, Sequence[float]]) -> "PhaseStats":
        return cls({k: v[0] for k, v in d.items()}, {k: v[1] for k, v in d.items()})


# -- file I/O -----------------------------------------------------------------

_DTYPES = {"int16le": "<i2", "f32le": "<f4"}


def save_volume(vol: Volume | np.ndarray, sidecar: str | Path, dtype: str = "int16le",
                spacing: Sequence[float] | None = None) -> None:
    """Write a JSON sidecar plus a raw little-endian blob next to it."""
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    sidecar = Path(sidecar)
    if isinstance(vol, Volume):
        data, spacing, phase = vol.data, vol.spacing, vol.phase
    else:
        data, phase = np.asarray(vol), None
        spacing = tuple(spacing or (1.0, 1.0, 1.0))
    raw = np.ascontiguousarray(data).astype(_DTYPES[dtype])
    if dtype == "int16le" and not np.array_equal(raw, data):
        raise ValueError("int16le storage would lose precision; use f32le or round the data")
    blob = sidecar.with_suffix(".raw")
    blob.write_bytes(raw.tobytes(order="C"))
    meta = {
        "dims": [int(data.shape[2]), int(data.shape[1]), int(data.shape[0])],
        "spacing_mm": [float(s) for s in spacing],
        "phase": phase.value if phase is not None else None,
        "dtype": dtype,
        "data_file": blob.name,
    }
    sidecar.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc


def load_volume(sidecar: str | Path) -> Volume:
    sidecar = Path(sidecar)
    meta = _read_json(sidecar)
    try:
        nx, ny, nz = (int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing_mm"])
        dtype = _DTYPES[meta["dtype"]]
        blob = sidecar.parent / meta["data_file"]
        phase = meta.get("phase")
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{sidecar}: malformed volume sidecar ({exc!r})") from exc
    if not blob.is_file():
        raise MissingFileError(f"missing file: {blob}")
    flat = np.frombuffer(blob.read_bytes(), dtype=dtype)
    if flat.size != nx * ny * nz:
        raise DimsMismatchError(f"{blob}: {flat.size} values, dims imply {nx * ny * nz}")
    return Volume(flat.reshape(nz, ny, nx).astype(np.float64), spacing,
                  Phase(phase) if phase else None)


def save_study(study: Study, directory: str | Path, dtype: str = "int16le") -> Path:
    """Write a study directory with ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"id": study.id, "phases": {}}
    for p, v in study.volumes.items():
        name = f"{p.value}.json"
        save_volume(v, directory / name, dtype=dtype)
        manifest["phases"][p.value] = name
    if study.liver_mask is not None:
        save_volume(study.liver_mask.astype(np.int16), directory / "liver_mask.json",
                    dtype="int16le", spacing=study.spacing)
        manifest["liver_mask"] = "liver_mask.json"
    manifest["lesions"] = [{"kind": les.kind, "box": les.box.to_list()} for les in study.lesions]
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_study(directory: str | Path) -> Study:
    directory = Path(directory)
    manifest = _read_json(directory / "manifest.json")
    try:
        sid = str(manifest["id"])
        phase_files = dict(manifest["phases"])
        lesions = [LesionAnnotation(Box3.from_list(les["box"]), les["kind"])
                   for les in manifest.get("lesions", [])]
        phases = {Phase(k): v for k, v in phase_files.items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{directory}: malformed study manifest ({exc!r})") from exc
    if not phases:
        raise ManifestError(f"{directory}: manifest declares no phases")
    volumes = {}
    for p, rel in phases.items():
        vol = load_volume(directory / rel)
        vol.phase = p
        volumes[p] = vol
    mask = None
    if manifest.get("liver_mask"):
        mask = load_volume(directory / manifest["liver_mask"]).data > 0
    study = Study(sid, volumes, mask, lesions)
    nx, ny, nz = study.dims
    for les in lesions:
        b = les.box
        if b.x0 < 0 or b.y0 < 0 or b.z0 < 0 or b.x1 > nx or b.y1 > ny or b.z1 > nz:
            raise ManifestError(f"{directory}: lesion box {b.to_list()} outside dims {study.dims}")
    return study


# -- resampling ---------------------------------------------------------------

def _keys_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def _interp_matrix(n_in: int, n_out: int, scale: float, mode: str) -> np.ndarray:
    """Dense (n_out, n_in) interpolation weights for one axis, edge clamped."""
    pos = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(pos).astype(int)
    frac = pos - base
    if mode == "trilinear":
        offsets = np.array([0, 1])
        weights = np.stack([1 - frac, frac], axis=1)
    else:
        offsets = np.array([-1, 0, 1, 2])
        weights = _keys_kernel(frac[:, None] - offsets[None, :])
    idx = np.clip(base[:, None] + offsets[None, :], 0, n_in - 1)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), len(offsets)), idx.ravel()), weights.ravel())
    return mat


def resample(v: Volume, target_spacing: Sequence[float], mode: str = "cubic") -> Volume:
    """Resample to ``target_spacing`` (mm) with separable trilinear or Keys cubic
    convolution (a = -0.5).  Voxel centers are aligned at ``(i + 0.5) * spacing``."""
    if mode not in ("trilinear", "cubic"):
        raise ValueError(f"mode must be 'trilinear' or 'cubic', got {mode!r}")
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or not all(s > 0 and math.isfinite(s) for s in target):
        raise ValueError(f"target spacing must be three positive values, got {target_spacing}")
    if target == v.spacing:
        return Volume(v.data.copy(), v.spacing, v.phase)
    out = np.asarray(v.data, dtype=np.float64)
    # array axes are (z, y, x); spacing is (x, y, z)
    for axis, (n_in, s_in, s_out) in zip((2, 1, 0), zip(v.dims, v.spacing, target)):
        n_out = max(1, int(round(n_in * s_in / s_out)))
        mat = _interp_matrix(n_in, n_out, s_out / s_in, mode)
        out = np.moveaxis(np.tensordot(mat, np.moveaxis(out, axis, 0), axes=(1, 0)), 0, axis)
    return Volume(np.ascontiguousarray(out), target, v.phase)


# -- normalization ------------------------------------------------------------

def normalize(v: Volume, stats: PhaseStats) -> Volume:
    if v.phase not in stats.mean:
        raise KeyError(f"no normalization statistics for phase {v.phase}")
    return Volume((v.data - stats.mean[v.phase]) / stats.std[v.phase], v.spacing, v.phase)


def denormalize(v: Volume, stats: PhaseStats) -> Volume:
    if v.phase not in stats.mean:
        raise KeyError(f"no normalization statistics for phase {v.phase}")
    return Volume(v.data * stats.std[v.phase] + stats.mean[v.phase], v.spacing, v.phase)


def compute_phase_stats(studies: Sequence[Study]) -> PhaseStats:
    """Corpus-level HU mean/std per phase, pooled over every voxel."""
    acc: dict[Phase, list[float]] = {}
    for s in studies:
        for p, v in s.volumes.items():
            a = acc.setdefault(p, [0.0, 0.0, 0.0])
            a[0] += v.data.size
            a[1] += float(v.data.sum())
            a[2] += float(np.square(v.data).sum())
    if not acc:
        raise ValueError("cannot compute phase statistics from an empty corpus")
    mean, std = {}, {}
    for p, (n, s1, s2) in acc.items():
        mean[p] = s1 / n
        std[p] = math.sqrt(max(s2 / n - mean[p] ** 2, 0.0)) or 1.0
    return PhaseStats(mean, std)


class PhaseNormalizer(TransformerMixin, BaseEstimator):
    """Fits per-phase HU statistics on a list of studies and standardizes
    study volumes with them."""

    def fit(self, X: Sequence[Study], y=None):
        self.stats_ = compute_phase_stats(list(X))
        return self

    def transform(self, X: Sequence[Study]) -> list[dict[Phase, np.ndarray]]:
        check_is_fitted(self, "stats_")
        return [{p: normalize(v, self.stats_).data for p, v in s.volumes.items()} for s in X]


# -- cropping -----------------------------------------------------------------

@dataclass
class StudyCrop:
    volumes: dict[Phase, np.ndarray]
    lesions: list[LesionAnnotation]
    origin: tuple[int, int, int]
    liver_mask: np.ndarray | None = None


def crop_window(study: Study, origin: Sequence[int], size: Sequence[int],
                arrays: Mapping[Phase, np.ndarray] | None = None) -> StudyCrop:
    """Cut the window ``[origin, origin + size)`` (x, y, z order) from every phase.

    Lesion boxes are translated into window coordinates and clipped; lesions
    with no overlap are dropped.
    """
    (ox, oy, oz), (cx, cy, cz) = origin, size
    sl = (slice(oz, oz + cz), slice(oy, oy + cy), slice(ox, ox + cx))
    source = arrays if arrays is not None else {p: v.data for p, v in study.volumes.items()}
    vols = {p: a[sl] for p, a in source.items()}
    lesions = []
    for les in study.lesions:
        b = les.box.translate(-ox, -oy, -oz)
        lo = (max(b.x0, 0), max(b.y0, 0), max(b.z0, 0))
        hi = (min(b.x1, cx), min(b.y1, cy), min(b.z1, cz))
        if all(l < h for l, h in zip(lo, hi)):
            lesions.append(LesionAnnotation(Box3(*lo, *hi), les.kind))
    mask = study.liver_mask[sl] if study.liver_mask is not None else None
    return StudyCrop(vols, lesions, (ox, oy, oz), mask)


def crop_random(study: Study, size: Sequence[int], rng_seed,
                arrays: Mapping[Phase, np.ndarray] | None = None) -> StudyCrop:
    """Random window of ``size`` (cx, cy, cz), identical for every phase.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    size = tuple(int(s) for s in size)
    dims = study.dims
    if len(size) != 3 or any(c < 1 or c > d for c, d in zip(size, dims)):
        raise ValueError(f"crop size {size} must be within volume dims {dims}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    origin = tuple(int(rng.integers(0, d - c + 1)) for c, d in zip(size, dims))
    return crop_window(study, origin, size, arrays)


# -- sliding windows ----------------------------------------------------------

def sliding_windows(dims: int | Sequence[int], window_depth: int,
                    overlap_depth: int = 16) -> list[tuple[int, int]]:
    """Half-open depth ranges covering ``[0, nz)``; the last one is shifted back
    to end at ``nz``.  ``dims`` may be ``nz`` or ``(nx, ny, nz)``."""
    nz = int(dims) if np.isscalar(dims) else int(dims[-1])
    if window_depth < 1 or overlap_depth < 0:
        raise ValueError("window depth must be positive and overlap nonnegative")
    if overlap_depth >= window_depth:
        raise ValueError(f"overlap {overlap_depth} must be smaller than window {window_depth}")
    if nz <= window_depth:
        return [(0, nz)]
    step = window_depth - overlap_depth
    starts = [0]
    while starts[-1] + window_depth < nz:
        starts.append(min(starts[-1] + step, nz - window_depth))
    return [(s, s + window_depth) for s in starts]


def stitch(window_outputs: Sequence[tuple[tuple[int, int], np.ndarray]],
           depth_axis: int = -3) -> np.ndarray:
    """Reassemble per-window fields along depth; overlapped voxels take the
    arithmetic mean of every contributing window."""
    if not window_outputs:
        raise ValueError("no window outputs to stitch")
    ranges = [r for r, _ in window_outputs]
    fields = [np.moveaxis(np.asarray(f, dtype=np.float64), depth_axis, 0) for _, f in window_outputs]
    rest = fields[0].shape[1:]
    nz = max(e for _, e in ranges)
    total = np.zeros((nz,) + rest)
    count = np.zeros(nz)
    for (s, e), f in zip(ranges, fields):
        if f.shape != (e - s,) + rest:
            raise ValueError(f"window {s}:{e} has field shape {f.shape}, expected {(e - s,) + rest}")
        total[s:e] += f
        count[s:e] += 1
    if np.any(count == 0):
        raise ValueError("window ranges leave depth gaps")
    out = total / count.reshape((-1,) + (1,) * len(rest))
    return np.moveaxis(out, 0, depth_axis)
