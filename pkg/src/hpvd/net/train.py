"""Training loop: random phase subsets, random crops, Adam with a step decay."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import DivergenceError
from ..volume import PHASES, Phase, PhaseStats, Study, compute_phase_stats, crop_random, normalize, phases_label
from . import model as M

log = logging.getLogger(__name__)

PHASE_SUBSETS: tuple[tuple[Phase, ...], ...] = tuple(
    combo for r in range(1, 5) for combo in itertools.combinations(PHASES, r))


@dataclass
class TrainConfig:
    batch_size: int = 4
    n_batches: int = 2000
    learning_rate: float = 5e-4
    lr_drop_fraction: float = 0.5
    lr_drop_factor: float = 10.0
    seed: int = 0
    crop_size: tuple[int, int, int] = (64, 64, 16)
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    size_weight: float = 0.1
    width: int = 8
    dtype: str = "float32"
    phase_sampling: str = "uniform"

    def __post_init__(self):
        self.crop_size = tuple(int(c) for c in self.crop_size)
        if self.batch_size < 1 or self.n_batches < 1:
            raise ValueError("batch_size and n_batches must be positive")
        if not self.learning_rate > 0 or self.lr_drop_factor <= 0:
            raise ValueError("learning rate and drop factor must be positive")
        if self.size_weight < 0:
            raise ValueError("size_weight must be nonnegative")
        if len(self.crop_size) != 3 or min(self.crop_size) < 1:
            raise ValueError(f"crop_size must be three positive ints, got {self.crop_size}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.phase_sampling not in ("uniform", "all"):
            raise ValueError(f"unknown phase sampling policy {self.phase_sampling!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_size"] = list(self.crop_size)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def lr_at(self, batch: int) -> float:
        """Learning rate for 0-based ``batch``; drops once at the schedule midpoint."""
        drop_at = int(round(self.n_batches * self.lr_drop_fraction))
        return self.learning_rate / (self.lr_drop_factor if batch >= drop_at else 1.0)


def sample_phase_subset(rng: np.random.Generator) -> tuple[Phase, ...]:
    """One of the 15 nonempty phase combinations, uniformly."""
    return PHASE_SUBSETS[int(rng.integers(len(PHASE_SUBSETS)))]


class Adam:
    """Adam with bias correction.  Parameters without a gradient in a step
    are left untouched, moments included."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            m = self.m.setdefault(k, np.zeros_like(params[k]))
            v = self.v.setdefault(k, np.zeros_like(params[k]))
            t = self.t[k] = self.t.get(k, 0) + 1
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            params[k] -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]
    stats: PhaseStats
    log: list[dict] = field(default_factory=list)


def loss_and_grads(params: dict[str, np.ndarray], state: dict[str, np.ndarray],
                   crops: dict[Phase, np.ndarray], targets: M.Targets, cfg: TrainConfig,
                   update_stats: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    """One train-mode forward/backward pass.  Only parameters that took part in
    the graph get an entry in the returned gradient dict."""
    P = M.as_tensors(params, np.dtype(cfg.dtype), requires_grad=True)
    logits, size = M.build_graph(crops, P, state, training=True, update_stats=update_stats)
    loss = M.centernet_loss(logits, size, targets, alpha=cfg.focal_alpha, beta=cfg.focal_beta,
                            size_weight=cfg.size_weight)
    loss.backward()
    grads = {k: t.grad for k, t in P.items() if t.grad is not None}
    return float(loss.data), grads


def train(studies: Sequence[Study], cfg: TrainConfig, stats: PhaseStats | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Train the detector from He-uniform initialization.

    Each batch draws one phase subset (uniform over the 15 combinations, or
    all four phases with ``phase_sampling="all"``) and ``batch_size`` random
    crops from studies holding those phases.  Deterministic for a given seed.
    """
    studies = list(studies)
    if not studies:
        raise ValueError("training needs at least one study")
    stats = stats or compute_phase_stats(studies)
    rng = np.random.default_rng(cfg.seed)
    params, state = M.init_params(cfg.seed, cfg.width)
    opt = Adam()
    normed = [{p: normalize(v, stats).data.astype(cfg.dtype) for p, v in s.volumes.items()} for s in studies]
    history = []
    for b in range(cfg.n_batches):
        subset = PHASES if cfg.phase_sampling == "all" else sample_phase_subset(rng)
        eligible = [i for i, s in enumerate(studies) if set(subset) <= set(s.phases)]
        if not eligible:
            raise ValueError(f"no training study holds phases {phases_label(subset)}")
        picks = rng.choice(eligible, size=cfg.batch_size)
        crops = [crop_random(studies[i], cfg.crop_size, rng, arrays=normed[i]) for i in picks]
        batch = {p: np.stack([c.volumes[p] for c in crops]) for p in subset}
        targets = M.build_targets([c.lesions for c in crops], batch[subset[0]].shape)
        lr = cfg.lr_at(b)
        try:
            loss, grads = loss_and_grads(params, state, batch, targets, cfg)
        except DivergenceError as exc:
            raise DivergenceError(f"batch {b + 1} (phases {phases_label(subset)}, lr {lr:g}): {exc}") from exc
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(f"batch {b + 1}: non-finite gradient")
        opt.step(params, grads, lr)
        row = {"batch": b + 1, "loss": loss, "lr": lr, "phases": phases_label(subset)}
        history.append(row)
        if callback is not None:
            callback(row)
        if (b + 1) % 100 == 0:
            recent = history[-100:]
            log.info("batch %d/%d loss %.4f", b + 1, cfg.n_batches,
                     math.fsum(r["loss"] for r in recent) / len(recent))
    state.update(M.size_range_state([s.lesions for s in studies]))
    return TrainResult(params, state, stats, history)
