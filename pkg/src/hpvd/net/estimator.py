"""scikit-learn style wrapper around training and inference."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..geometry import Detection
from ..volume import PhaseNormalizer, Study
from .checkpoint import load_checkpoint, save_checkpoint
from .infer import infer_study
from .train import TrainConfig, train


def _check_studies(X) -> list[Study]:
    if isinstance(X, Study):
        X = [X]
    X = list(X)
    bad = [type(s).__name__ for s in X if not isinstance(s, Study)]
    if bad:
        raise TypeError(f"expected Study objects, got {sorted(set(bad))}")
    return X


class HeteroPhaseDetector(BaseEstimator):
    """Hetero-phase lesion detector accepting any nonempty subset of the four
    contrast phases at inference.

    ``fit`` takes annotated studies; ``predict`` returns raw decoded
    detections (kind ``"unfiltered"``) per study, in voxel coordinates.
    """

    def __init__(self, width=8, n_batches=2000, batch_size=4, learning_rate=5e-4,
                 lr_drop_fraction=0.5, crop_size=(64, 64, 16), size_weight=0.1,
                 focal_alpha=2.0, focal_beta=4.0, phase_sampling="uniform",
                 window_depth=48, overlap_depth=16, k_max=20, score_min=0.01,
                 dtype="float32", random_state=0):
        self.width = width
        self.n_batches = n_batches
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_drop_fraction = lr_drop_fraction
        self.crop_size = crop_size
        self.size_weight = size_weight
        self.focal_alpha = focal_alpha
        self.focal_beta = focal_beta
        self.phase_sampling = phase_sampling
        self.window_depth = window_depth
        self.overlap_depth = overlap_depth
        self.k_max = k_max
        self.score_min = score_min
        self.dtype = dtype
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, n_batches=self.n_batches,
                           learning_rate=self.learning_rate, lr_drop_fraction=self.lr_drop_fraction,
                           seed=int(self.random_state), crop_size=tuple(self.crop_size),
                           focal_alpha=self.focal_alpha, focal_beta=self.focal_beta,
                           size_weight=self.size_weight, width=self.width, dtype=self.dtype,
                           phase_sampling=self.phase_sampling)

    def fit(self, X: Sequence[Study], y=None, callback=None):
        studies = _check_studies(X)
        cfg = self.train_config()
        self.normalizer_ = PhaseNormalizer().fit(studies)
        result = train(studies, cfg, self.normalizer_.stats_, callback=callback)
        self.params_, self.state_, self.log_ = result.params, result.state, result.log
        self.stats_ = result.stats
        return self

    def predict(self, X: Sequence[Study], phases=None) -> list[list[Detection]]:
        check_is_fitted(self, "params_")
        return [infer_study(s, self.params_, self.state_, self.stats_, phases,
                            window_depth=self.window_depth, overlap_depth=self.overlap_depth,
                            k_max=self.k_max, score_min=self.score_min, dtype=np.dtype(self.dtype))
                for s in _check_studies(X)]

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.state_, self.stats_, self.get_params())

    @classmethod
    def load(cls, path: str | Path) -> "HeteroPhaseDetector":
        ckpt = load_checkpoint(path)
        config = dict(ckpt["config"])
        if "crop_size" in config:
            config["crop_size"] = tuple(config["crop_size"])
        est = cls(**config)
        est.params_, est.state_, est.stats_ = ckpt["params"], ckpt["state"], ckpt["stats"]
        est.log_ = []
        return est
