"""Multiple instance hybrid estimator: objective, gradients and training loop.

Positive instances are scored by a hybrid-detector probability

    P+(x) = exp(-beta * ||x - D a||^2 / ||x - D_bg b||^2)

and negative instances by exp(-||x - D_bg c||^2). Each positive bag is
summarized with a generalized mean of its instance probabilities, and the
training loss is

    -sum_bags (1/p) log mean_j P+(x_j)^p  +  rho * sum_neg ||x - D_bg c||^2.

Training alternates Lasso sparse coding with one projected gradient step per
dictionary column, targets first, then backgrounds.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .data import BagDataset, Dictionary, HyperParams
from .sparse import batch_solve, lipschitz_constant

logger = logging.getLogger(__name__)

# Denominator floor of the hybrid ratio is DEN_FLOOR_PER_BAND * d.
DEN_FLOOR_PER_BAND = 1e-8
MAX_HALVINGS = 20


class NumericalError(RuntimeError):
    """Raised when the objective stops being finite during training."""


def den_floor(n_bands: int) -> float:
    return DEN_FLOOR_PER_BAND * n_bands


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def prob_positive(x, dictionary: Dictionary, code_full, code_bg, beta: float) -> float:
    """Probability that ``x`` is a target instance under the hybrid-detector model."""
    x = np.asarray(x, dtype=np.float64)
    code_full = np.asarray(code_full, dtype=np.float64)
    code_bg = np.asarray(code_bg, dtype=np.float64)
    _check_finite(x, code_full, code_bg)
    if not beta > 0:
        raise ValueError("beta must be positive")
    e_full = x - dictionary.matrix @ code_full
    e_bg = x - dictionary.backgrounds @ code_bg
    num = float(e_full @ e_full)
    den = max(float(e_bg @ e_bg), den_floor(x.shape[0]))
    return math.exp(-beta * num / den)


def prob_negative(x, backgrounds, code_bg) -> float:
    """Probability that ``x`` is background: ``exp(-||x - D_bg c||^2)``."""
    x = np.asarray(x, dtype=np.float64)
    backgrounds = np.asarray(backgrounds, dtype=np.float64)
    code_bg = np.asarray(code_bg, dtype=np.float64)
    _check_finite(x, backgrounds, code_bg)
    e = x - backgrounds @ code_bg
    return math.exp(-float(e @ e))


def log_generalized_mean(log_values, p: float) -> float:
    """``log`` of the power mean ``((1/n) sum v^p)^(1/p)`` given ``log v``."""
    log_values = np.asarray(log_values, dtype=np.float64)
    if log_values.size == 0:
        raise ValueError("generalized mean of an empty list")
    if p == 0 or math.isnan(p):
        raise ValueError("p must be nonzero")
    if math.isinf(p):
        return float(log_values.max() if p > 0 else log_values.min())
    z = p * log_values
    if np.abs(z).max() < 1.0:
        # small |p|: avoid cancellation in log(mean(exp(z))) ~ 0
        return float(np.log1p(np.expm1(z).mean()) / p)
    return float((logsumexp(z) - math.log(log_values.size)) / p)


def generalized_mean(values, p: float) -> float:
    """Power mean of values in (0, 1]; ``p = +inf``/``-inf`` give max/min."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("generalized mean of an empty list")
    if np.any(values <= 0):
        raise ValueError("generalized mean needs strictly positive values")
    return math.exp(log_generalized_mean(np.log(values), p))


@dataclass(frozen=True)
class SparseCodes:
    """Lasso codes for every training instance.

    ``pos_full`` codes positive-bag instances against the whole dictionary,
    ``pos_bg`` against the backgrounds only, ``neg_bg`` codes negative-bag
    instances against the backgrounds. Rows follow bag order.
    """

    pos_full: np.ndarray
    pos_bg: np.ndarray
    neg_bg: np.ndarray


class _Stacked:
    """Instances of a dataset split by bag label, stacked in bag order."""

    def __init__(self, dataset: BagDataset):
        pos = dataset.positive_bags
        neg = dataset.negative_bags
        if not pos:
            raise ValueError("objective needs at least one positive bag")
        self.n_bands = dataset.n_bands
        self.X_pos = np.vstack([b.instances for b in pos])
        self.X_neg = np.vstack([b.instances for b in neg]) if neg else np.empty((0, dataset.n_bands))
        sizes = np.array([b.n_instances for b in pos])
        self.sizes = sizes
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.bag_of = np.repeat(np.arange(len(pos)), sizes)


def _residual_terms(S: _Stacked, Dm: np.ndarray, T: int, codes: SparseCodes):
    Db = Dm[:, T:]
    E_full = S.X_pos - codes.pos_full @ Dm.T
    E_bg = S.X_pos - codes.pos_bg @ Db.T
    E_neg = S.X_neg - codes.neg_bg @ Db.T
    num = (E_full * E_full).sum(axis=1)
    raw_den = (E_bg * E_bg).sum(axis=1)
    floor = den_floor(S.n_bands)
    floored = raw_den < floor
    den = np.where(floored, floor, raw_den)
    return E_full, E_bg, E_neg, num, den, floored


def _segment_lse(z, S: _Stacked):
    m = np.maximum.reduceat(z, S.starts)
    return m + np.log(np.add.reduceat(np.exp(z - m[S.bag_of]), S.starts))


def _objective_parts(S, Dm, T, codes, p, beta, rho):
    E_full, E_bg, E_neg, num, den, floored = _residual_terms(S, Dm, T, codes)
    ratio = num / den
    if math.isinf(p):
        agg = -np.maximum.reduceat(-ratio, S.starts) if p > 0 else np.maximum.reduceat(ratio, S.starts)
        pos_term = beta * agg.sum()
    else:
        # log P = -beta * ratio
        lse = _segment_lse(-p * beta * ratio, S)
        pos_term = -((lse - np.log(S.sizes)) / p).sum()
    neg_term = rho * (E_neg * E_neg).sum()
    return pos_term + neg_term, (E_full, E_bg, E_neg, num, den, floored, ratio)


def _instance_weights(S, ratio, p, beta):
    """Derivative of the positive-bag term w.r.t. each instance's ratio, divided by beta."""
    if math.isinf(p):
        w = np.zeros_like(ratio)
        for i, s in enumerate(S.starts):
            seg = ratio[s : s + S.sizes[i]]
            j = int(np.argmin(seg) if p > 0 else np.argmax(seg))
            w[s + j] = 1.0
        return w
    z = -p * beta * ratio
    return np.exp(z - _segment_lse(z, S)[S.bag_of])


def _grad(S, Dm, T, codes, p, beta, rho, column, parts=None):
    if parts is None:
        _, parts = _objective_parts(S, Dm, T, codes, p, beta, rho)
    E_full, E_bg, E_neg, num, den, floored, ratio = parts
    w = _instance_weights(S, ratio, p, beta)
    coef = -2.0 * beta * w * codes.pos_full[:, column] / den
    g = (coef[:, None] * E_full).sum(axis=0)
    if column >= T:
        k = column - T
        coef_den = 2.0 * beta * w * num / (den * den) * codes.pos_bg[:, k]
        coef_den[floored] = 0.0
        g += (coef_den[:, None] * E_bg).sum(axis=0)
        if E_neg.shape[0]:
            g += (-2.0 * rho * codes.neg_bg[:, k][:, None] * E_neg).sum(axis=0)
    return g


def _rho(params: HyperParams, dataset: BagDataset) -> float:
    if params.rho is not None:
        return float(params.rho)
    if dataset.N_neg == 0:
        return 1.0
    return params.resolved_rho(dataset)


def objective(dataset: BagDataset, dictionary: Dictionary, codes: SparseCodes, params: HyperParams) -> float:
    """Negative log bag likelihood with generalized-mean positive bags and rho-weighted negatives."""
    S = _Stacked(dataset)
    value, _ = _objective_parts(S, dictionary.matrix, dictionary.n_targets, codes,
                                params.p, params.beta, _rho(params, dataset))
    return float(value)


def grad_column(dataset: BagDataset, dictionary: Dictionary, codes: SparseCodes, params: HyperParams,
                kind: str, index: int) -> np.ndarray:
    """Gradient of :func:`objective` w.r.t. one dictionary column, codes held fixed.

    ``kind`` is ``"target"`` or ``"background"``; ``index`` counts within that block.
    """
    T, M = dictionary.n_targets, dictionary.n_backgrounds
    if kind == "target":
        if not 0 <= index < T:
            raise IndexError(f"target index {index} out of range for T={T}")
        column = index
    elif kind == "background":
        if not 0 <= index < M:
            raise IndexError(f"background index {index} out of range for M={M}")
        column = T + index
    else:
        raise ValueError(f"kind must be 'target' or 'background', got {kind!r}")
    S = _Stacked(dataset)
    return _grad(S, dictionary.matrix, T, codes, params.p, params.beta, _rho(params, dataset), column)


# --------------------------------------------------------------------------
# sparse coding against the current dictionary


class _Coder:
    def __init__(self, S: _Stacked, params: HyperParams):
        self.S = S
        self.lam = params.lam
        self.iters = params.ista_iters
        self.tol = params.ista_tol
        self.nonneg = params.nonneg

    def _solve(self, D, X, init):
        if X.shape[0] == 0:
            return np.empty((0, D.shape[1]))
        return batch_solve(D, X, self.lam, self.iters, self.tol, init, self.nonneg)[0]

    def full(self, Dm, init=None):
        return self._solve(Dm, self.S.X_pos, init)

    def background(self, Db, init_pos=None, init_neg=None):
        return self._solve(Db, self.S.X_pos, init_pos), self._solve(Db, self.S.X_neg, init_neg)

    def all(self, Dm, T, warm: SparseCodes | None = None):
        Db = Dm[:, T:]
        pos_bg, neg_bg = self.background(
            Db, None if warm is None else warm.pos_bg, None if warm is None else warm.neg_bg
        )
        return SparseCodes(self.full(Dm, None if warm is None else warm.pos_full), pos_bg, neg_bg)


def solve_codes(dataset: BagDataset, dictionary: Dictionary, params: HyperParams,
                warm: SparseCodes | None = None) -> SparseCodes:
    """Lasso codes of every training instance against ``dictionary``."""
    S = _Stacked(dataset)
    return _Coder(S, params).all(dictionary.matrix, dictionary.n_targets, warm)


# --------------------------------------------------------------------------
# initialization


def initialize_dictionary(dataset: BagDataset, params: HyperParams) -> Dictionary:
    """Seeded starting dictionary.

    Backgrounds are k-means centroids of the negative instances. Targets come
    from the positive instances worst explained by those backgrounds: the top
    ``init_quantile`` fraction of each positive bag, pooled, then averaged
    (T = 1) or clustered into T groups.
    """
    from sklearn.cluster import KMeans

    dataset.require_trainable()
    T, M = params.n_targets, params.n_backgrounds
    X_neg = np.vstack([b.instances for b in dataset.negative_bags])
    if X_neg.shape[0] < M:
        raise ValueError(f"need at least M={M} negative instances to initialize backgrounds")
    km = KMeans(n_clusters=M, n_init=4, random_state=params.seed).fit(X_neg)
    Db = _unit_columns(km.cluster_centers_.T)

    pooled = []
    for bag in dataset.positive_bags:
        codes = batch_solve(Db, bag.instances, params.lam, params.ista_iters, params.ista_tol,
                            nonneg=params.nonneg)[0]
        E = bag.instances - codes @ Db.T
        err = (E * E).sum(axis=1)
        q = max(1, int(math.ceil(params.init_quantile * bag.n_instances)))
        pooled.append(bag.instances[np.argsort(-err, kind="stable")[:q]])
    pooled = np.vstack(pooled)
    if T == 1:
        Dt = pooled.mean(axis=0)[:, None]
    else:
        if pooled.shape[0] < T:
            raise ValueError(f"too few positive instances to initialize T={T} targets")
        Dt = KMeans(n_clusters=T, n_init=4, random_state=params.seed).fit(pooled).cluster_centers_.T
    return Dictionary(_unit_columns(Dt), Db)


def _unit_columns(D):
    norms = np.linalg.norm(D, axis=0)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero column")
    return D / norms


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingState:
    """Dictionary, codes and objective trace of a training run."""

    dictionary: Dictionary
    codes: SparseCodes
    objective_history: list[float] = field(default_factory=list)
    outer_iter: int = 0
    step_log: list[list[float]] = field(default_factory=list)
    converged: bool = False

    def write_trace(self, path):
        """Delimited trace: iteration, objective, accepted step per column (0 = rejected)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            n_cols = self.dictionary.n_targets + self.dictionary.n_backgrounds
            w.writerow(["iter", "objective", *(f"step_{c}" for c in range(n_cols))])
            for it, obj in enumerate(self.objective_history):
                steps = self.step_log[it - 1] if it > 0 else [""] * n_cols
                w.writerow([it, repr(obj), *(repr(s) if s != "" else "" for s in steps)])


def train(dataset: BagDataset, params: HyperParams, init: Dictionary | None = None,
          callback: Callable[[TrainingState], None] | None = None) -> TrainingState:
    """Learn target and background signatures from labeled bags.

    Each outer iteration visits every column once, targets first. A column
    update takes a gradient step with the codes frozen, renormalizes the
    column, re-solves the affected codes and keeps the candidate only if the
    objective did not increase; otherwise the step is halved, up to
    ``MAX_HALVINGS`` times in all. Steps are taken along the normalized
    gradient, so ``params.step_size`` bounds how far a unit column moves.
    Each column remembers the last step it tried and starts its next update
    from twice that, capped at ``params.step_size``.

    Stops after ``params.max_outer_iters`` iterations or once an iteration
    changes the objective by less than ``params.obj_tol``.
    """
    dataset.require_trainable()
    if init is None:
        init = initialize_dictionary(dataset, params)
    elif not init.is_unit_norm():
        init = init.normalized()
    if init.n_bands != dataset.n_bands:
        raise ValueError(f"initial dictionary has {init.n_bands} bands, data has {dataset.n_bands}")
    T = init.n_targets
    n_cols = T + init.n_backgrounds
    p, beta, rho = params.p, params.beta, _rho(params, dataset)

    S = _Stacked(dataset)
    coder = _Coder(S, params)
    Dm = init.matrix.copy()
    codes = coder.all(Dm, T)
    obj, parts = _objective_parts(S, Dm, T, codes, p, beta, rho)
    if not np.isfinite(obj):
        raise NumericalError(f"initial objective is not finite ({obj})")
    state = TrainingState(Dictionary.from_matrix(Dm, T), codes, [float(obj)])
    steps = np.full(n_cols, params.step_size)
    min_step = params.step_size * 0.5**MAX_HALVINGS

    for it in range(params.max_outer_iters):
        used = []
        for c in range(n_cols):
            g = _grad(S, Dm, T, codes, p, beta, rho, c, parts)
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for column {c} at iteration {it}")
            g_norm = np.linalg.norm(g)
            step = min(2.0 * steps[c], params.step_size)
            accepted = 0.0
            for _ in range(MAX_HALVINGS + 1 if g_norm > 0 else 0):
                col = Dm[:, c] - (step / g_norm) * g
                norm = np.linalg.norm(col)
                if norm > 0:
                    cand = Dm.copy()
                    cand[:, c] = col / norm
                    cand_codes = _recode(coder, cand, T, codes, c)
                    cand_obj, cand_parts = _objective_parts(S, cand, T, cand_codes, p, beta, rho)
                    if np.isfinite(cand_obj) and cand_obj <= obj:
                        Dm, codes, obj, parts = cand, cand_codes, cand_obj, cand_parts
                        accepted = step
                        break
                if step <= min_step:
                    break
                step *= 0.5
            steps[c] = step
            used.append(accepted)
        state.objective_history.append(float(obj))
        state.step_log.append(used)
        state.outer_iter = it + 1
        state.dictionary = Dictionary.from_matrix(Dm, T)
        state.codes = codes
        logger.debug("iter %d objective %.10g steps %s", it + 1, obj, used)
        if callback is not None:
            callback(state)
        if abs(state.objective_history[-2] - state.objective_history[-1]) < params.obj_tol:
            state.converged = True
            break
    return state


def _recode(coder: _Coder, Dm, T, codes: SparseCodes, column: int) -> SparseCodes:
    # Target columns only enter the full-dictionary codes of positive instances.
    pos_full = coder.full(Dm, codes.pos_full)
    if column < T:
        return SparseCodes(pos_full, codes.pos_bg, codes.neg_bg)
    pos_bg, neg_bg = coder.background(Dm[:, T:], codes.pos_bg, codes.neg_bg)
    return SparseCodes(pos_full, pos_bg, neg_bg)


__all__ = [
    "DEN_FLOOR_PER_BAND",
    "NumericalError",
    "SparseCodes",
    "TrainingState",
    "den_floor",
    "generalized_mean",
    "grad_column",
    "initialize_dictionary",
    "lipschitz_constant",
    "log_generalized_mean",
    "objective",
    "prob_negative",
    "prob_positive",
    "solve_codes",
    "train",
]
