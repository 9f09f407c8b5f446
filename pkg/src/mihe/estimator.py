"""scikit-learn style estimators wrapping training and detection."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import core
from .data import (
    BagDataset,
    DatasetError,
    Dictionary,
    HyperParams,
    load_dictionary,
    normalize_dataset,
    normalize_rows,
    save_dictionary,
)
from .detectors import METHODS, BackgroundModel, ace_scores, fit_background, hd_scores
from .sparse import batch_solve
from .validation import check_bags, check_instances


class MIHE(BaseEstimator):
    """Learn target and background signatures from bag-labeled spectra.

    Parameters
    ----------
    n_targets : int, default=1
        Number of target signatures T.
    n_backgrounds : int, default=5
        Number of background signatures M.
    p : float, default=5.0
        Generalized-mean exponent used to aggregate instance probabilities
        within a positive bag; large values approach the max.
    rho : float or None, default=None
        Weight of the negative-bag term in (0, 1]; None uses ``min(1, N+/N-)``.
    beta : float, default=5.0
        Scale of the residual ratio in the positive-instance probability.
    lam : float, default=1e-3
        l1 weight of the Lasso sparse codes.
    max_iter : int, default=100
        Maximum number of outer iterations.
    step_size : float, default=0.1
        Initial length of each normalized column gradient step.
    tol : float, default=1e-6
        Stop when one outer iteration changes the objective by less than this.
    ista_iter, ista_tol : int, float
        ISTA iteration cap and per-signal objective-decrease tolerance.
    nonneg : bool, default=False
        Constrain sparse codes to be nonnegative.
    init_quantile : float, default=0.1
        Fraction of each positive bag used to seed the target signatures.
    detector : {"hd", "ace"}, default="hd"
        Statistic returned by :meth:`decision_function`.
    normalize : bool, default=False
        Scale every instance to unit norm before training and scoring.
    ridge : float, default=1e-6
        Ridge added to the ACE background covariance.
    random_state : int, default=0
        Seed for the k-means initialization.

    Attributes
    ----------
    dictionary_ : Dictionary
        Learned signatures, columns of unit norm.
    target_signatures_ : ndarray of shape (n_targets, n_bands)
    background_signatures_ : ndarray of shape (n_backgrounds, n_bands)
    background_model_ : BackgroundModel
        Mean and covariance of the negative-bag instances, used by ACE.
    objective_history_ : list of float
        Objective after initialization and after every outer iteration.
    n_iter_ : int
    """

    def __init__(self, n_targets=1, n_backgrounds=5, p=5.0, rho=None, beta=5.0, lam=1e-3,
                 max_iter=100, step_size=0.1, tol=1e-6, ista_iter=200, ista_tol=1e-6,
                 nonneg=False, init_quantile=0.1, detector="hd", normalize=False, ridge=1e-6, random_state=0):
        self.n_targets = n_targets
        self.n_backgrounds = n_backgrounds
        self.p = p
        self.rho = rho
        self.beta = beta
        self.lam = lam
        self.max_iter = max_iter
        self.step_size = step_size
        self.tol = tol
        self.ista_iter = ista_iter
        self.ista_tol = ista_tol
        self.nonneg = nonneg
        self.init_quantile = init_quantile
        self.detector = detector
        self.normalize = normalize
        self.ridge = ridge
        self.random_state = random_state

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            p=self.p, rho=self.rho, beta=self.beta, lam=self.lam, n_targets=self.n_targets,
            n_backgrounds=self.n_backgrounds, max_outer_iters=self.max_iter, step_size=self.step_size,
            obj_tol=self.tol, ista_iters=self.ista_iter, ista_tol=self.ista_tol, nonneg=self.nonneg,
            init_quantile=self.init_quantile, seed=self.random_state,
        )

    def fit(self, bags, y=None, init: Dictionary | None = None, callback=None):
        """Fit on a ``BagDataset`` or on a list of ``(n_i, d)`` arrays with bag labels ``y``."""
        if self.detector not in METHODS:
            raise ValueError(f"detector must be one of {METHODS}, got {self.detector!r}")
        dataset = self.preprocess(check_bags(bags, y))
        dataset.require_trainable()
        params = self.hyperparams()
        state = core.train(dataset, params, init=init, callback=callback)
        self._set_fitted(dataset, state.dictionary)
        self.objective_history_ = list(state.objective_history)
        self.n_iter_ = state.outer_iter
        self.state_ = state
        return self

    def preprocess(self, data):
        """Apply the instance preprocessing used in training (a no-op unless ``normalize``)."""
        if not self.normalize:
            return data
        return normalize_dataset(data) if isinstance(data, BagDataset) else normalize_rows(data)

    def _set_fitted(self, dataset: BagDataset, dictionary: Dictionary):
        self.dictionary_ = dictionary
        self.target_signatures_ = dictionary.targets.T.copy()
        self.background_signatures_ = dictionary.backgrounds.T.copy()
        self.n_features_in_ = dictionary.n_bands
        neg = np.vstack([b.instances for b in dataset.negative_bags])
        self.background_model_ = fit_background(neg, self.ridge)

    @classmethod
    def from_dictionary(cls, dictionary: Dictionary, background_data, **params) -> "MIHE":
        """Build a fitted estimator from a saved dictionary and negative training bags."""
        est = cls(n_targets=dictionary.n_targets, n_backgrounds=dictionary.n_backgrounds, **params)
        dataset = check_bags(background_data) if isinstance(background_data, BagDataset) else None
        if dataset is None:
            dataset = BagDataset.from_arrays([np.asarray(background_data)], [0])
        est._set_fitted(est.preprocess(dataset), dictionary)
        est.objective_history_ = []
        est.n_iter_ = 0
        return est

    def decision_function(self, X, method: str | None = None) -> np.ndarray:
        """Per-instance detection statistic (larger means more target-like)."""
        check_is_fitted(self, "dictionary_")
        X = self.preprocess(check_instances(X, self.n_features_in_))
        method = method or self.detector
        if method == "ace":
            if not hasattr(self, "background_model_"):
                raise ValueError("ACE needs a background model; fit one or pass background data")
            return ace_scores(X, self.dictionary_.targets, self.background_model_)
        if method == "hd":
            return hd_scores(X, self.dictionary_, self.lam, self.ista_iter, self.ista_tol, self.nonneg)
        raise ValueError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")

    def transform(self, X) -> np.ndarray:
        """Lasso codes of ``X`` against the learned dictionary, shape ``(N, T + M)``."""
        check_is_fitted(self, "dictionary_")
        X = self.preprocess(check_instances(X, self.n_features_in_))
        return batch_solve(self.dictionary_.matrix, X, self.lam, self.ista_iter, self.ista_tol,
                           nonneg=self.nonneg)[0]

    def bag_scores(self, bags, method: str | None = None) -> np.ndarray:
        """Maximum instance statistic of each bag."""
        return np.array([self.decision_function(np.atleast_2d(b), method).max() for b in bags])


def _model_from_covariance(mean, cov) -> BackgroundModel:
    inv = np.linalg.inv(cov)
    inv = 0.5 * (inv + inv.T)
    for a in (mean, cov, inv):
        a.setflags(write=False)
    return BackgroundModel(mean, cov, inv)


def save_model(estimator: MIHE, path, wavelengths=None):
    """Write a fitted estimator: dictionary, hyperparameters and ACE background model."""
    check_is_fitted(estimator, "dictionary_")
    path = Path(path)
    save_dictionary(estimator.dictionary_, path, wavelengths=wavelengths)
    doc = json.loads(path.read_text(encoding="utf-8"))
    doc["params"] = estimator.get_params()
    doc["background_model"] = {
        "mean": estimator.background_model_.mean.tolist(),
        "covariance": estimator.background_model_.covariance.tolist(),
    }
    doc["objective_history"] = [float(v) for v in estimator.objective_history_]
    path.write_text(json.dumps(doc) + "\n", encoding="utf-8")
    return path


def load_model(path) -> MIHE:
    """Rebuild a fitted :class:`MIHE` from :func:`save_model` output.

    A plain dictionary file (no background model) loads too; ACE then needs
    a background model set by the caller.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    dictionary = load_dictionary(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    params = doc.get("params", {})
    est = MIHE(**{k: v for k, v in params.items() if k in MIHE._get_param_names()})
    est.n_targets, est.n_backgrounds = dictionary.n_targets, dictionary.n_backgrounds
    est.dictionary_ = dictionary
    est.target_signatures_ = dictionary.targets.T.copy()
    est.background_signatures_ = dictionary.backgrounds.T.copy()
    est.n_features_in_ = dictionary.n_bands
    est.objective_history_ = list(doc.get("objective_history", []))
    est.n_iter_ = max(len(est.objective_history_) - 1, 0)
    bg = doc.get("background_model")
    if bg is not None:
        mean = np.asarray(bg["mean"], dtype=np.float64)
        cov = np.asarray(bg["covariance"], dtype=np.float64)
        if mean.shape != (dictionary.n_bands,) or cov.shape != (dictionary.n_bands,) * 2:
            raise DatasetError(f"background model in {path} does not match the dictionary bands")
        est.background_model_ = _model_from_covariance(mean, cov)
    return est
