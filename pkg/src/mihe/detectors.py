"""Signature-based detectors: structured-background ACE and the hybrid sub-pixel detector.

Both detectors score instances row by row with row-local arithmetic, so a
score never depends on which other instances were scored with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import den_floor
from .data import BagDataset, Dictionary
from .metrics import ScoreSet
from .sparse import DEFAULT_ITERS, DEFAULT_TOL, batch_solve, correlate

METHODS = ("ace", "hd")


class SingularCovarianceError(np.linalg.LinAlgError):
    """Background covariance cannot be inverted; add a ridge."""


@dataclass(frozen=True)
class BackgroundModel:
    """Background mean, ridge-regularized covariance and its inverse."""

    mean: np.ndarray
    covariance: np.ndarray
    inverse: np.ndarray

    @property
    def n_bands(self) -> int:
        return self.mean.shape[0]


def fit_background(instances, ridge: float = 0.0) -> BackgroundModel:
    """Sample mean and covariance (divisor n - 1) plus ``ridge * I``."""
    X = np.asarray(instances, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("fit_background needs at least two instances")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    mean = X.mean(axis=0)
    cov = np.cov(X, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    cov = cov + ridge * np.eye(X.shape[1])
    cov = 0.5 * (cov + cov.T)
    if np.linalg.cond(cov) > 1e14:
        raise SingularCovarianceError(
            "background covariance is singular or nearly so; fit with ridge > 0"
        )
    inv = np.linalg.inv(cov)
    inv = 0.5 * (inv + inv.T)
    for a in (mean, cov, inv):
        a.setflags(write=False)
    return BackgroundModel(mean, cov, inv)


def _ace_rows(X, S, bg: BackgroundModel):
    # X (N, d), S (d, T) -> (N, T) squared whitened cosines.
    Z = X - bg.mean
    WZ = correlate(bg.inverse, Z)  # rows: inverse @ z
    zz = (WZ * Z).sum(axis=1)
    out = np.zeros((X.shape[0], S.shape[1]))
    for t in range(S.shape[1]):
        s = S[:, t]
        Ws = bg.inverse @ s
        ss = float(s @ Ws)
        if not ss > 0:
            raise ValueError("target signature has zero whitened energy")
        sz = (Z * Ws).sum(axis=1)
        denom = ss * zz
        ok = denom > 0
        out[ok, t] = sz[ok] ** 2 / denom[ok]
    return np.clip(out, 0.0, 1.0)


def ace_scores(X, targets, bg: BackgroundModel, fuse: str = "max") -> np.ndarray:
    """ACE statistic of every row of ``X``.

    ``targets`` is one signature ``(d,)`` or several as columns ``(d, T)``;
    several signatures are fused with ``max`` (or ``mean``).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    S = np.asarray(targets, dtype=np.float64)
    if S.ndim == 1:
        S = S[:, None]
    if X.shape[1] != bg.n_bands or S.shape[0] != bg.n_bands:
        raise ValueError("dimension mismatch between data, signatures and background model")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(S))):
        raise ValueError("non-finite input")
    if not np.any(S, axis=0).all():
        raise ValueError("target signature is all zeros")
    per_target = _ace_rows(X, S, bg)
    if fuse == "max":
        return per_target.max(axis=1)
    if fuse == "mean":
        return per_target.mean(axis=1)
    raise ValueError(f"unknown fusion {fuse!r}")


def ace_score(x, s, bg: BackgroundModel) -> float:
    """``(s' C^-1 z)^2 / ((s' C^-1 s)(z' C^-1 z))`` with ``z = x - mean``; 0 when ``z = 0``."""
    return float(ace_scores(np.asarray(x, dtype=np.float64)[None, :], s, bg)[0])


def _reconstruct(A, D):
    out = A[:, 0:1] * D[:, 0]
    for k in range(1, D.shape[1]):
        out = out + A[:, k : k + 1] * D[:, k]
    return out


def hd_scores(X, dictionary: Dictionary, lam: float, iters: int = DEFAULT_ITERS, tol: float = DEFAULT_TOL,
              nonneg: bool = False) -> np.ndarray:
    """Hybrid detector: background-only residual energy over full-dictionary residual energy.

    Both residuals use Lasso codes; the full-dictionary residual is padded by
    the same floor that guards the training ratio. Values above 1 mean the
    target columns improve the fit.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != dictionary.n_bands:
        raise ValueError(f"data has {X.shape[1]} bands, dictionary has {dictionary.n_bands}")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    D, Db = dictionary.matrix, dictionary.backgrounds
    A_full = batch_solve(D, X, lam, iters, tol, nonneg=nonneg)[0]
    A_bg = batch_solve(Db, X, lam, iters, tol, nonneg=nonneg)[0]
    E_full = X - _reconstruct(A_full, D)
    E_bg = X - _reconstruct(A_bg, Db)
    return (E_bg * E_bg).sum(axis=1) / ((E_full * E_full).sum(axis=1) + den_floor(X.shape[1]))


def hd_score(x, dictionary: Dictionary, lam: float, **kwargs) -> float:
    return float(hd_scores(np.asarray(x, dtype=np.float64)[None, :], dictionary, lam, **kwargs)[0])


def score_dataset(data, method: str, dictionary: Dictionary, background: BackgroundModel | None = None,
                  lam: float = 1e-3, iters: int = DEFAULT_ITERS, tol: float = DEFAULT_TOL,
                  nonneg: bool = False, fuse: str = "max", chunk_size: int | None = None) -> ScoreSet:
    """Score every instance of a dataset (or rows of a matrix) with ACE or HD.

    Rows are scored in chunks of ``chunk_size``; because scoring is
    row-local the result does not depend on the chunking.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    if isinstance(data, BagDataset):
        X = data.instances()
        bag_ids = np.repeat([b.id for b in data.bags], [b.n_instances for b in data.bags])
        inst = np.concatenate([np.arange(b.n_instances) for b in data.bags])
        truth = None if data.instance_labels is None else np.concatenate(data.instance_labels)
    else:
        X = np.asarray(data, dtype=np.float64).reshape(-1, dictionary.n_bands) if np.size(data) else np.empty((0, dictionary.n_bands))
        bag_ids = np.full(X.shape[0], "", dtype=object)
        inst = np.arange(X.shape[0])
        truth = None
    if X.shape[0] and X.shape[1] != dictionary.n_bands:
        raise ValueError(f"data has {X.shape[1]} bands, dictionary has {dictionary.n_bands}")
    if method == "ace" and background is None:
        raise ValueError("ACE needs a background model")

    def run(rows):
        if rows.shape[0] == 0:
            return np.empty(0)
        if method == "ace":
            return ace_scores(rows, dictionary.targets, background, fuse)
        return hd_scores(rows, dictionary, lam, iters, tol, nonneg)

    if chunk_size is None or chunk_size >= max(X.shape[0], 1):
        scores = run(X)
    else:
        scores = np.concatenate([run(X[i : i + chunk_size]) for i in range(0, X.shape[0], chunk_size)])
    return ScoreSet(scores, truth, bag_ids=np.asarray(bag_ids, dtype=str), instance=inst)
