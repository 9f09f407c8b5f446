"""Target signature learning from bag-labeled hyperspectral data.

A multiple-instance hybrid estimator learns target and background
signatures from bags labeled only as containing target or not; the learned
signatures drive ACE and hybrid sub-pixel detectors.
"""

from .core import NumericalError, SparseCodes, TrainingState, generalized_mean, objective, train
from .data import (
    Bag,
    BagDataset,
    DatasetError,
    Dictionary,
    HyperParams,
    Spectrum,
    load_dataset,
    load_dictionary,
    normalize_dataset,
    normalize_rows,
    save_dataset,
    save_dictionary,
)
from .detectors import ace_scores, fit_background, hd_scores, score_dataset
from .estimator import MIHE, load_model, save_model
from .metrics import ScoreSet, auc, nauc_at_far, roc
from .simulate import SimConfig, generate, table1_config
from .sparse import batch_solve, ista_solve

__version__ = "0.1.0"

__all__ = [
    "Bag", "BagDataset", "DatasetError", "Dictionary", "HyperParams", "MIHE", "NumericalError",
    "ScoreSet", "SimConfig", "SparseCodes", "Spectrum", "TrainingState", "ace_scores", "auc",
    "batch_solve", "fit_background", "generalized_mean", "generate", "hd_scores", "ista_solve",
    "load_dataset", "load_dictionary", "load_model", "nauc_at_far", "normalize_dataset", "normalize_rows",
    "objective", "roc",
    "save_dataset", "save_dictionary", "save_model", "score_dataset", "table1_config", "train",
]
