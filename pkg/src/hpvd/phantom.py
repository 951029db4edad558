"""Deterministic synthetic multi-phase CT studies with planted lesions.

A study is an ellipsoidal liver inside a uniform soft-tissue background.
Untreated HCC lesions follow a wash-in/wash-out contrast pattern relative to
the parenchyma; TACE-treated lesions are uniformly hyperdense in every phase.
All HU values are synthesis choices; the only hard constraint is that TACE
material sits well above the 200 HU classifier threshold.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ManifestError, MissingFileError
from .geometry import Box3
from .volume import PHASES, LesionAnnotation, Phase, Study, Volume, load_study, save_study


def _phase_map(values: Mapping) -> dict[Phase, float]:
    return {Phase(k): float(v) for k, v in values.items()}


@dataclass
class PhantomConfig:
    dims: tuple[int, int, int] = (64, 64, 20)
    spacing: tuple[float, float, float] = (1.5, 1.5, 5.0)
    liver_center: tuple[float, float, float] = (32.0, 32.0, 10.0)
    liver_axes: tuple[float, float, float] = (27.0, 25.0, 8.5)
    background_hu: dict = field(default_factory=lambda: {"NC": 35, "AP": 45, "VP": 60, "DP": 55})
    parenchyma_hu: dict = field(default_factory=lambda: {"NC": 55, "AP": 70, "VP": 100, "DP": 90})
    hcc_delta_hu: dict = field(default_factory=lambda: {"NC": -10, "AP": 40, "VP": -25, "DP": -25})
    tace_hu: float = 350.0
    hcc_count: tuple[int, int] = (1, 2)
    tace_in_target_prob: float = 0.25
    tace_only_control_prob: float = 0.5
    inplane_semi_axis: tuple[float, float] = (4.0, 8.0)
    depth_semi_axis: tuple[float, float] = (1.5, 3.0)
    noise_sigma: float = 10.0
    n_speckles: int = 4
    speckle_hu: float = 300.0
    phases: tuple[str, ...] = ("NC", "AP", "VP", "DP")
    max_retries: int = 200

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        for name in ("background_hu", "parenchyma_hu", "hcc_delta_hu"):
            setattr(self, name, {Phase(k).value: float(v) for k, v in getattr(self, name).items()})
        if self.tace_hu <= 200:
            raise ValueError("TACE HU must exceed 200 so the threshold classifier can fire")
        if min(self.dims) < 1 or min(self.spacing) <= 0:
            raise ValueError("dims and spacing must be positive")
        lo, hi = self.hcc_count
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid hcc_count range {self.hcc_count}")
        for rng_name in ("inplane_semi_axis", "depth_semi_axis"):
            a, b = getattr(self, rng_name)
            if not 0 < a <= b:
                raise ValueError(f"invalid {rng_name} range {(a, b)}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not self.phases:
            raise ValueError("at least one phase must be rendered")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhantomConfig":
        d = dict(d)
        for key in ("dims", "spacing", "liver_center", "liver_axes", "hcc_count",
                    "inplane_semi_axis", "depth_semi_axis", "phases"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _centers(dims: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nx, ny, nz = dims
    z, y, x = np.meshgrid(np.arange(nz) + 0.5, np.arange(ny) + 0.5, np.arange(nx) + 0.5, indexing="ij")
    return x, y, z


def _ellipsoid_radius(x, y, z, center, axes) -> np.ndarray:
    return np.sqrt(((x - center[0]) / axes[0]) ** 2 + ((y - center[1]) / axes[1]) ** 2
                   + ((z - center[2]) / axes[2]) ** 2)


def _soft_ellipsoid(x, y, z, center, axes) -> np.ndarray:
    """Occupancy with a linear ramp one voxel wide straddling the surface.

    Distance to the surface is approximated to first order by
    ``(rho - 1) / |grad rho|``.
    """
    u = [(c - c0) / a for c, c0, a in zip((x, y, z), center, axes)]
    rho = np.sqrt(u[0] ** 2 + u[1] ** 2 + u[2] ** 2)
    grad = np.sqrt(sum((ui / a) ** 2 for ui, a in zip(u, axes)))
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(rho > 0.5, (rho - 1.0) * rho / grad, -np.inf)
    return np.clip(0.5 - dist, 0.0, 1.0)


def _tight_box(mask: np.ndarray) -> Box3:
    zs, ys, xs = np.nonzero(mask)
    return Box3(xs.min(), ys.min(), zs.min(), xs.max() + 1, ys.max() + 1, zs.max() + 1)


def _boxes_clear(a: Box3, b: Box3, margin: float) -> bool:
    return any(a_hi + margin <= b_lo or b_hi + margin <= a_lo
               for a_lo, a_hi, b_lo, b_hi in zip(a.lo, a.hi, b.lo, b.hi))


def generate_study(cfg: PhantomConfig, seed: int | np.random.SeedSequence, study_id: str = "phantom",
                   n_hcc: int | None = None, n_tace: int | None = None) -> Study:
    """Render one study.  Lesion counts default to draws from ``cfg``."""
    rng = np.random.default_rng(seed)
    if n_hcc is None:
        n_hcc = int(rng.integers(cfg.hcc_count[0], cfg.hcc_count[1] + 1))
    if n_tace is None:
        n_tace = int(rng.random() < cfg.tace_in_target_prob) if n_hcc else 0
    x, y, z = _centers(cfg.dims)
    liver = _ellipsoid_radius(x, y, z, cfg.liver_center, cfg.liver_axes) <= 1.0

    placed: list[tuple[str, np.ndarray, Box3]] = []
    for kind in ["HCC"] * n_hcc + ["TACE"] * n_tace:
        for _ in range(cfg.max_retries):
            axes = (rng.uniform(*cfg.inplane_semi_axis), rng.uniform(*cfg.inplane_semi_axis),
                    rng.uniform(*cfg.depth_semi_axis))
            center = tuple(c + rng.uniform(-1, 1) * a for c, a in zip(cfg.liver_center, cfg.liver_axes))
            weight = _soft_ellipsoid(x, y, z, center, axes)
            support = weight > 0
            if not support.any() or np.any(support & ~liver):
                continue
            box = _tight_box(support)
            if all(_boxes_clear(box, other, 1.0) for _, _, other in placed):
                placed.append((kind, weight, box))
                break
        else:
            raise ValueError(f"study {study_id}: could not place {kind} lesion after "
                             f"{cfg.max_retries} attempts; configuration too crowded")

    speckles = []
    if cfg.n_speckles:
        free = liver.copy()
        for _, _, box in placed:
            free[max(int(box.z0) - 2, 0):int(box.z1) + 2, max(int(box.y0) - 2, 0):int(box.y1) + 2,
                 max(int(box.x0) - 2, 0):int(box.x1) + 2] = False
        cand = np.flatnonzero(free)
        if cand.size:
            speckles = rng.choice(cand, size=min(cfg.n_speckles, cand.size), replace=False)

    volumes = {}
    shape = liver.shape
    for name in cfg.phases:
        p = Phase(name)
        hu = np.where(liver, cfg.parenchyma_hu[p.value], cfg.background_hu[p.value]).astype(np.float64)
        for kind, weight, _ in placed:
            if kind == "HCC":
                hu += weight * cfg.hcc_delta_hu[p.value]
            else:
                hu = (1 - weight) * hu + weight * cfg.tace_hu
        if cfg.noise_sigma:
            hu += rng.normal(0.0, cfg.noise_sigma, size=shape)
        hu.ravel()[speckles] = cfg.speckle_hu
        volumes[p] = Volume(np.clip(np.rint(hu), -1024, 3071), cfg.spacing, p)
    lesions = [LesionAnnotation(box, kind) for kind, _, box in placed]
    return Study(study_id, volumes, liver, lesions)


def _study_seed(seed: int, split_index: int, is_target: bool, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), split_index, int(is_target), k])


DEFAULT_FRACTIONS = {"train": 0.5, "val": 0.25, "test": 0.25}


def split_counts(n_target: int, n_control: int,
                 fractions: Mapping[str, float] | None = None) -> dict[str, tuple[int, int]]:
    """Allocate targets and controls over splits; rounding leftovers go to the first split."""
    fractions = dict(fractions or DEFAULT_FRACTIONS)
    if n_target < 0 or n_control < 0:
        raise ValueError("study counts must be nonnegative")
    if not fractions or any(f < 0 for f in fractions.values()) or sum(fractions.values()) <= 0:
        raise ValueError(f"invalid split fractions {fractions}")
    total = sum(fractions.values())
    out = {}
    for n_idx, n in enumerate((n_target, n_control)):
        alloc = {name: int(n * f / total) for name, f in fractions.items()}
        first = next(iter(fractions))
        alloc[first] += n - sum(alloc.values())
        for name in fractions:
            prev = out.get(name, (0, 0))
            out[name] = (alloc[name], prev[1]) if n_idx == 0 else (prev[0], alloc[name])
    return out


def generate_dataset(cfg: PhantomConfig, n_target: int = 0, n_control: int = 0, seed: int = 0,
                     splits: Mapping[str, tuple[int, int]] | None = None,
                     fractions: Mapping[str, float] | None = None) -> dict[str, list[Study]]:
    """Generate target and control studies for each split.

    Pass ``splits`` as ``{name: (n_target, n_control)}`` for exact sizes, or
    totals plus ``fractions``.  Study ids are ``<split>_t###`` / ``<split>_c###``.
    """
    if splits is None:
        splits = split_counts(n_target, n_control, fractions)
    dataset: dict[str, list[Study]] = {}
    for s_idx, (name, (nt, nc)) in enumerate(splits.items()):
        if nt < 0 or nc < 0:
            raise ValueError(f"split {name}: counts must be nonnegative")
        studies = []
        for k in range(nt):
            studies.append(generate_study(cfg, _study_seed(seed, s_idx, True, k), f"{name}_t{k:03d}"))
        for k in range(nc):
            ss = _study_seed(seed, s_idx, False, k)
            n_tace = int(np.random.default_rng(ss.spawn(1)[0]).random() < cfg.tace_only_control_prob)
            studies.append(generate_study(cfg, ss, f"{name}_c{k:03d}", n_hcc=0, n_tace=n_tace))
        dataset[name] = studies
    return dataset


INDEX_NAME = "index.json"


def write_dataset(dataset: Mapping[str, Sequence[Study]], out_dir: str | Path,
                  cfg: PhantomConfig | None = None, seed: int | None = None) -> Path:
    """Write every study directory plus ``index.json`` listing the splits."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"splits": {}}
    for name, studies in dataset.items():
        index["splits"][name] = []
        for s in studies:
            save_study(s, out_dir / s.id)
            index["splits"][name].append(s.id)
    if cfg is not None:
        index["phantom_config"] = cfg.to_dict()
    if seed is not None:
        index["seed"] = seed
    path = out_dir / INDEX_NAME
    path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return path


def read_index(data_dir: str | Path) -> dict[str, list[str]]:
    path = Path(data_dir) / INDEX_NAME
    if not path.is_file():
        raise MissingFileError(f"missing dataset index: {path}")
    try:
        splits = json.loads(path.read_text())["splits"]
        return {str(k): [str(s) for s in v] for k, v in splits.items()}
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise ManifestError(f"{path}: malformed dataset index ({exc!r})") from exc


def load_split(data_dir: str | Path, split: str | None = None) -> list[Study]:
    """Load one split (or every split, in index order, when ``split`` is None)."""
    splits = read_index(data_dir)
    if split is not None and split not in splits:
        raise ManifestError(f"split {split!r} not in dataset index (have {sorted(splits)})")
    names = [split] if split is not None else list(splits)
    return [load_study(Path(data_dir) / sid) for name in names for sid in splits[name]]
