"""Hetero-phase volumetric detection of liver lesions in multi-phase CT.

The detector accepts any nonempty subset of the four contrast phases
(NC, AP, VP, DP).  The package also holds the box geometry, postprocessing,
FROC/LROC evaluation statistics and a synthetic phantom generator.
"""

from .errors import DataError, DivergenceError, HPVDError, PhaseUnavailableError
from .geometry import Box2, Box3, Detection, StudyPredictions, flag_match, iobb3, iou3
from .metrics import StudyEval, auc_lroc, compare_auc_paired, froc, lroc
from .net.estimator import HeteroPhaseDetector
from .phantom import PhantomConfig, generate_dataset, generate_study
from .postprocess import LesionPostprocessor, PostprocessConfig, pipeline
from .volume import PHASES, Phase, Study, Volume, parse_phases

__version__ = "0.1.0"

__all__ = [
    "Box2", "Box3", "DataError", "Detection", "DivergenceError", "HPVDError", "HeteroPhaseDetector",
    "LesionPostprocessor", "PHASES", "Phase", "PhaseUnavailableError", "PhantomConfig", "PostprocessConfig",
    "Study", "StudyEval", "StudyPredictions", "Volume", "auc_lroc", "compare_auc_paired", "flag_match",
    "froc", "generate_dataset", "generate_study", "iobb3", "iou3", "lroc", "parse_phases", "pipeline",
]
