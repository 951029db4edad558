"""Toy hetero-phase detector.

Per-phase encoders share convolution weights but keep their own batch-norm
affine parameters and running statistics.  Encoded phase features are merged
with an order- and count-agnostic mean/variance fusion, then a shared trunk
of pseudo-3D (axial/coronal/sagittal) convolutions, a two-level feature
pyramid and CenterNet-style center and size heads follow.

Parameters live in a flat ``dict[str, ndarray]`` (float64 master copies);
batch-norm running buffers live in a separate ``state`` dict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..errors import DivergenceError
from ..volume import PHASES, LesionAnnotation, Phase
from . import autodiff as ad
from .autodiff import Tensor

STRIDE = (1, 4, 4)
HEAD_BIAS = -2.19
SIZE_BIAS = math.log(8.0)
# state buffers bounding decoded log extents, (x, y, z)
SIZE_RANGE_KEYS = ("size.log_extent_min", "size.log_extent_max")

# plane -> (kernel shape, padding) for a 3x3 kernel lifted into 3D
_ACS_PLANES = {
    "ax": ((1, 3, 3), (0, 1, 1)),
    "co": ((3, 1, 3), (1, 0, 1)),
    "sa": ((3, 3, 1), (1, 1, 0)),
}


@dataclass(frozen=True)
class Architecture:
    width: int = 8

    @property
    def channels(self) -> dict[str, int]:
        c = self.width
        return {"enc": c, "t1": 2 * c, "t2": 4 * c, "fpn": 2 * c}


def acs_split(out_channels: int) -> tuple[int, int, int]:
    """Output channels per (axial, coronal, sagittal) group; remainder goes to axial."""
    base = out_channels // 3
    return (out_channels - 2 * base, base, base)


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_acs(params: dict, rng, name: str, ci: int, co: int, bias: bool) -> None:
    for plane, n in zip(_ACS_PLANES, acs_split(co)):
        if n == 0:
            continue
        params[f"{name}.{plane}"] = he_uniform(rng, (n, ci, 3, 3), fan_in=ci * 9)
        if bias:
            params[f"{name}.{plane}.bias"] = np.zeros(n)


def _add_bn(params: dict, state: dict, name: str, c: int) -> None:
    params[f"{name}.gamma"] = np.ones(c)
    params[f"{name}.beta"] = np.zeros(c)
    state[f"{name}.mean"] = np.zeros(c)
    state[f"{name}.var"] = np.ones(c)


def init_params(seed: int = 0, width: int = 8) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """He-uniform convolutions, unit/zero batch-norm affine parameters."""
    rng = np.random.default_rng(seed)
    ch = Architecture(width).channels
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}
    c = ch["enc"]
    _add_acs(params, rng, "enc.stem", 1, c, bias=False)
    for p in PHASES:
        _add_bn(params, state, f"enc.stem.bn.{p.value}", c)
    _add_acs(params, rng, "enc.block", c, c, bias=False)
    for p in PHASES:
        _add_bn(params, state, f"enc.block.bn.{p.value}", c)
    for branch in ("fuse.mean", "fuse.var"):
        params[branch] = he_uniform(rng, (c, c), fan_in=c)
        params[f"{branch}.bias"] = np.zeros(c)
    _add_acs(params, rng, "trunk.t1", c, ch["t1"], bias=False)
    _add_bn(params, state, "trunk.t1.bn", ch["t1"])
    _add_acs(params, rng, "trunk.t2", ch["t1"], ch["t2"], bias=False)
    _add_bn(params, state, "trunk.t2.bn", ch["t2"])
    f = ch["fpn"]
    params["fpn.lat4"] = he_uniform(rng, (f, ch["t1"]), fan_in=ch["t1"])
    params["fpn.lat4.bias"] = np.zeros(f)
    params["fpn.lat8"] = he_uniform(rng, (f, ch["t2"]), fan_in=ch["t2"])
    params["fpn.lat8.bias"] = np.zeros(f)
    _add_acs(params, rng, "fpn.smooth", f, f, bias=True)
    _add_acs(params, rng, "head.center.hidden", f, f, bias=True)
    params["head.center.out"] = he_uniform(rng, (1, f), fan_in=f)
    params["head.center.out.bias"] = np.full(1, HEAD_BIAS)
    _add_acs(params, rng, "head.size.hidden", f, f, bias=True)
    params["head.size.out"] = he_uniform(rng, (3, f), fan_in=f)
    params["head.size.out.bias"] = np.full(3, SIZE_BIAS)
    return params, state


def infer_width(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(params[f"enc.stem.{p}"].shape[0] for p in _ACS_PLANES if f"enc.stem.{p}" in params))


# -- graph building blocks ----------------------------------------------------

def _acs(x: Tensor, P: Mapping[str, Tensor], name: str, stride: int = 1) -> Tensor:
    outs = []
    for plane, (kshape, pad) in _ACS_PLANES.items():
        key = f"{name}.{plane}"
        if key not in P:
            continue
        outs.append(ad.conv3d(x, P[key], P.get(f"{key}.bias"), stride=(1, stride, stride),
                              padding=pad, kernel_shape=kshape))
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)


def _pointwise(x: Tensor, P: Mapping[str, Tensor], name: str) -> Tensor:
    return ad.conv3d(x, P[name], P.get(f"{name}.bias"), kernel_shape=(1, 1, 1))


def _bn(x: Tensor, P, state, name: str, training: bool, update_stats: bool) -> Tensor:
    return ad.batch_norm(x, P[f"{name}.gamma"], P[f"{name}.beta"], training=training,
                         running_mean=state.get(f"{name}.mean"), running_var=state.get(f"{name}.var"),
                         update_stats=update_stats)


def _encode(x: Tensor, phase: Phase, P, state, training: bool, update_stats: bool) -> Tensor:
    h = _acs(x, P, "enc.stem", stride=2)
    h = ad.relu(_bn(h, P, state, f"enc.stem.bn.{phase.value}", training, update_stats))
    h = _acs(h, P, "enc.block")
    return ad.relu(_bn(h, P, state, f"enc.block.bn.{phase.value}", training, update_stats))


def _fuse(feats: Sequence[Tensor], P) -> Tensor:
    mean, var = ad.set_moments(feats)
    return _pointwise(mean, P, "fuse.mean") + _pointwise(var, P, "fuse.var")


def _trunk_and_heads(a: Tensor, P, state, training: bool, update_stats: bool) -> tuple[Tensor, Tensor]:
    c4 = ad.relu(_bn(_acs(a, P, "trunk.t1", stride=2), P, state, "trunk.t1.bn", training, update_stats))
    c8 = ad.relu(_bn(_acs(c4, P, "trunk.t2", stride=2), P, state, "trunk.t2.bn", training, update_stats))
    p4 = _pointwise(c4, P, "fpn.lat4") + ad.upsample_inplane(_pointwise(c8, P, "fpn.lat8"))
    p4 = ad.relu(_acs(p4, P, "fpn.smooth"))
    logits = _pointwise(ad.relu(_acs(p4, P, "head.center.hidden")), P, "head.center.out")
    size = _pointwise(ad.relu(_acs(p4, P, "head.size.hidden")), P, "head.size.out")
    return logits, size


def as_tensors(params: Mapping[str, np.ndarray], dtype=np.float64,
               requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=requires_grad) for k, v in params.items()}


def _batched(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"phase input must be (D, H, W) or (N, D, H, W), got shape {x.shape}")
    return x


def check_input_shape(shape: Sequence[int]) -> None:
    d, h, w = shape[-3:]
    if h % 8 or w % 8 or min(d, h, w) < 1:
        raise ValueError(f"in-plane size must be a multiple of 8, got (D, H, W) = {(d, h, w)}")


def build_graph(crops: Mapping[Phase | str, np.ndarray], P: Mapping[str, Tensor],
                state: dict[str, np.ndarray], training: bool,
                update_stats: bool = True) -> tuple[Tensor, Tensor]:
    """Return (center logits, size map) tensors, each laid out (C, N, D, H/4, W/4)."""
    if not crops:
        raise ValueError("at least one phase input is required")
    items = sorted(((Phase(k), _batched(v)) for k, v in crops.items()), key=lambda kv: kv[0].index)
    shape = items[0][1].shape
    if any(v.shape != shape for _, v in items):
        raise ValueError("all phase inputs must share one shape")
    check_input_shape(shape)
    dtype = next(iter(P.values())).data.dtype
    feats = [_encode(Tensor(v[None].astype(dtype, copy=False)), p, P, state, training, update_stats)
             for p, v in items]
    return _trunk_and_heads(_fuse(feats, P), P, state, training, update_stats)


# -- public numpy-level API ---------------------------------------------------

def acs_conv(x: np.ndarray, weights: Mapping[str, np.ndarray], stride: int = 1) -> np.ndarray:
    """ACS convolution of a (C, D, H, W) array.

    ``weights`` maps any of ``"ax"``, ``"co"``, ``"sa"`` to (Co_g, C, 3, 3)
    kernels (and optionally ``"<plane>.bias"``); group outputs are stacked
    in axial, coronal, sagittal order.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected (C, D, H, W) input, got shape {x.shape}")
    for plane in _ACS_PLANES:
        if plane in weights and np.shape(weights[plane])[1] != x.shape[0]:
            raise ValueError(f"{plane} kernel expects {np.shape(weights[plane])[1]} channels, got {x.shape[0]}")
    P = {f"acs.{k}": Tensor(np.asarray(v, dtype=np.float64)) for k, v in weights.items()}
    out = _acs(Tensor(x[:, None]), P, "acs", stride=stride)
    return out.data[:, 0]


def phase_encode(image: np.ndarray, phase: Phase | str, params: Mapping[str, np.ndarray],
                 state: dict[str, np.ndarray], mode: str = "eval") -> np.ndarray:
    """Encode one normalized phase volume (D, H, W) or batch (N, D, H, W).

    Returns features shaped (C, N, D, H/2, W/2).  Train mode normalizes with
    batch statistics and updates the phase's running buffers in ``state``.
    """
    phase = Phase(phase)
    training = _check_mode(mode)
    if not training and state is None:
        raise ValueError("eval mode requires running statistics")
    x = _batched(image)
    return _encode(Tensor(x[None].astype(np.float64)), phase, as_tensors(params), state,
                   training, update_stats=True).data


def fuse(features: Sequence[np.ndarray], params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Mean/variance fusion of a nonempty set of equal-shape phase features."""
    if len(features) == 0:
        raise ValueError("cannot fuse an empty feature set")
    P = as_tensors(params)
    return _fuse([Tensor(np.asarray(f, dtype=np.float64)) for f in features], P).data


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def forward(crops: Mapping[Phase | str, np.ndarray], params: Mapping[str, np.ndarray],
            state: dict[str, np.ndarray], mode: str = "eval",
            dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Run the detector on a map of phase -> normalized volume.

    Inputs are (D, H, W) or batched (N, D, H, W).  Returns the sigmoid center
    heatmap and the log-extent size map, shaped (1, D, H/4, W/4) and
    (3, D, H/4, W/4), with a leading N axis for batched inputs.
    """
    training = _check_mode(mode)
    batched = np.ndim(next(iter(crops.values()))) == 4 if crops else False
    logits, size = build_graph(crops, as_tensors(params, dtype), state, training)
    heat = ad.sigmoid(logits.data.astype(np.float64))
    size = size.data.astype(np.float64)
    heat, size = np.moveaxis(heat, 1, 0), np.moveaxis(size, 1, 0)
    return (heat, size) if batched else (heat[0], size[0])


# -- targets and loss ---------------------------------------------------------

@dataclass
class Targets:
    heatmap: np.ndarray             # (N, D, H', W')
    cells: tuple[np.ndarray, ...]   # (n, d, h, w) index arrays of GT centers
    log_extent: np.ndarray          # (3, n_centers), (x, y, z) order

    @property
    def n_centers(self) -> int:
        return int(self.cells[0].size)


def center_cell(center: Sequence[float], out_shape: Sequence[int],
                stride: Sequence[int] = STRIDE) -> tuple[int, int, int]:
    """Heatmap cell (d, h, w) holding a continuous voxel-space (x, y, z) point."""
    cx, cy, cz = center
    sd, sh, sw = stride
    d, h, w = out_shape
    return (min(max(int(cz // sd), 0), d - 1),
            min(max(int(cy // sh), 0), h - 1),
            min(max(int(cx // sw), 0), w - 1))


def cell_center(cell: Sequence[int], stride: Sequence[int] = STRIDE) -> tuple[float, float, float]:
    """Voxel-space (x, y, z) center of heatmap cell (d, h, w)."""
    d, h, w = cell
    sd, sh, sw = stride
    return ((w + 0.5) * sw, (h + 0.5) * sh, (d + 0.5) * sd)


def gaussian_radius(extent: Sequence[float], stride: Sequence[int] = STRIDE) -> tuple[int, int, int]:
    """Per-axis (d, h, w) splat radius: one third of the box extent in cells."""
    ex, ey, ez = extent
    sd, sh, sw = stride
    return (int(ez / sd / 3), int(ey / sh / 3), int(ex / sw / 3))


def size_range_state(lesion_sets: Sequence[Sequence[LesionAnnotation]]) -> dict[str, np.ndarray]:
    """Per-axis min/max log extent over the given lesions, as state buffers.

    Decoding clips the size head to this range so a box is never larger or
    smaller than any box seen in training.  Empty when there are no lesions.
    """
    logs = [np.log(les.box.extent) for lesions in lesion_sets for les in lesions]
    if not logs:
        return {}
    logs = np.array(logs)
    return dict(zip(SIZE_RANGE_KEYS, (logs.min(axis=0), logs.max(axis=0))))


def build_targets(lesion_sets: Sequence[Sequence[LesionAnnotation]], in_shape: Sequence[int],
                  stride: Sequence[int] = STRIDE) -> Targets:
    """Gaussian-splatted center heatmaps for a batch of crops.

    Every lesion (HCC or TACE) produces a target: the detector localizes
    suspicious regions and type separation happens downstream.
    """
    d, h, w = in_shape[-3:]
    out = (-(-d // stride[0]), -(-h // stride[1]), -(-w // stride[2]))
    heat = np.zeros((len(lesion_sets),) + out)
    cells, logs = [], []
    grids = [np.arange(n) for n in out]
    for n, lesions in enumerate(lesion_sets):
        for les in lesions:
            c = center_cell(les.box.center, out, stride)
            r = gaussian_radius(les.box.extent, stride)
            sig = [(2 * ri + 1) / 6 for ri in r]
            g = np.ones(out)
            for axis, (ci, ri, si, grid) in enumerate(zip(c, r, sig, grids)):
                delta = grid - ci
                prof = np.where(np.abs(delta) <= ri, np.exp(-delta ** 2 / (2 * si ** 2)), 0.0)
                g = g * prof.reshape([-1 if i == axis else 1 for i in range(3)])
            heat[n] = np.maximum(heat[n], g)
            cells.append((n,) + c)
            logs.append(np.log(les.box.extent))
    idx = tuple(np.array(col, dtype=int) for col in zip(*cells)) if cells else \
        tuple(np.zeros(0, dtype=int) for _ in range(4))
    log_extent = np.array(logs).T if logs else np.zeros((3, 0))
    return Targets(heat, idx, log_extent)


def centernet_loss(logits: Tensor, size: Tensor, targets: Targets, *, alpha: float = 2.0,
                   beta: float = 4.0, size_weight: float = 0.1) -> Tensor:
    """Penalty-reduced focal loss on the center logits plus weighted L1 on
    log-extents at GT centers, normalized by the number of centers (min 1).

    ``logits`` and ``size`` are graph tensors laid out (C, N, D, H, W).
    """
    dtype = logits.data.dtype
    focal = ad.focal_loss_sum(logits, targets.heatmap[None].astype(dtype), alpha, beta)
    total = focal
    if targets.n_centers and size_weight:
        l1 = ad.l1_at(size, targets.cells, targets.log_extent.astype(dtype))
        total = total + l1 * size_weight
    loss = total * (1.0 / max(1, targets.n_centers))
    if not np.isfinite(loss.data):
        raise DivergenceError(f"non-finite loss {loss.data!r}")
    return loss


def focal_loss_reference(heatmap: np.ndarray, target: np.ndarray, alpha: float = 2.0,
                         beta: float = 4.0) -> float:
    """Probability-space focal loss sum, for checking the logit implementation."""
    p = np.clip(np.asarray(heatmap, dtype=np.float64), 1e-300, 1.0)
    q = np.clip(1.0 - p, 1e-300, 1.0)
    pos = target == 1
    pos_term = np.where(pos, (1 - p) ** alpha * np.log(p), 0.0)
    neg_term = np.where(pos, 0.0, (1 - target) ** beta * p ** alpha * np.log(q))
    return float(-(pos_term + neg_term).sum())
