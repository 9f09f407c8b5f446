"""ROC curves, AUC and normalized partial AUC for detector scores."""

from __future__ import annotations

import csv
import math
import statistics
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FPR = "fpr"
PER_M2 = "per_m2"
UNITS = (FPR, PER_M2)


@dataclass(frozen=True)
class ScoreSet:
    """Detector scores with optional per-instance truth and identifiers.

    ``area_m2`` is the scene area used to express false alarms per square meter.
    """

    scores: np.ndarray
    truth: np.ndarray | None = None
    bag_ids: np.ndarray | None = None
    instance: np.ndarray | None = None
    area_m2: float | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", scores)
        if self.truth is not None:
            truth = np.asarray(self.truth).astype(np.int64).reshape(-1)
            if truth.shape != scores.shape:
                raise ValueError("truth and scores differ in length")
            if not np.isin(truth, (0, 1)).all():
                raise ValueError("truth labels must be 0 or 1")
            object.__setattr__(self, "truth", truth)
        if self.area_m2 is not None and not self.area_m2 > 0:
            raise ValueError("area_m2 must be positive")

    def __len__(self):
        return self.scores.shape[0]

    def require_both_classes(self):
        if self.truth is None:
            raise ValueError("ROC needs ground-truth labels")
        n_pos = int(self.truth.sum())
        if n_pos == 0 or n_pos == len(self):
            raise ValueError("ROC needs at least one positive and one negative entry")


@dataclass(frozen=True)
class RocCurve:
    """Detection probability against false-alarm rate, one point per distinct threshold.

    The first point is ``(threshold=inf, pd=0, rate=0)``; ``units`` says
    whether ``rate`` is a false-positive fraction or false alarms per m^2.
    """

    thresholds: np.ndarray
    pd: np.ndarray
    rate: np.ndarray
    units: str = FPR


def roc(scores: ScoreSet, units: str = FPR) -> RocCurve:
    """Sweep the threshold over every distinct score; tied scores move together."""
    if units not in UNITS:
        raise ValueError(f"units must be one of {UNITS}")
    scores.require_both_classes()
    if units == PER_M2 and scores.area_m2 is None:
        raise ValueError("per-m^2 rates need ScoreSet.area_m2")
    order = np.argsort(-scores.scores, kind="stable")
    s = scores.scores[order]
    y = scores.truth[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    n_pos = tp[-1]
    n_neg = fp[-1]
    pd = np.r_[0.0, tp[last] / n_pos]
    denom = n_neg if units == FPR else scores.area_m2
    rate = np.r_[0.0, fp[last] / denom]
    return RocCurve(np.r_[np.inf, s[last]], pd, rate, units)


def _partial_area(rate, pd, upto):
    area = 0.0
    for i in range(1, rate.size):
        r0, r1 = rate[i - 1], rate[i]
        if r0 >= upto:
            break
        if r1 == r0:
            continue
        hi = min(r1, upto)
        p_hi = pd[i - 1] + (pd[i] - pd[i - 1]) * (hi - r0) / (r1 - r0)
        area += 0.5 * (pd[i - 1] + p_hi) * (hi - r0)
    return area


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under a false-positive-rate ROC curve."""
    if curve.units != FPR:
        raise ValueError("AUC is defined on false-positive-rate curves; got per-area rates")
    return float(_partial_area(curve.rate, curve.pd, math.inf))


def nauc_at_far(scores: ScoreSet, far_max: float, units: str = FPR) -> float:
    """Area under PD vs false-alarm rate on ``[0, far_max]``, divided by ``far_max``.

    A ``far_max`` beyond the largest achievable rate is clamped to it with a
    warning.
    """
    if not far_max > 0:
        raise ValueError("far_max must be positive")
    curve = roc(scores, units)
    top = float(curve.rate[-1])
    if far_max > top:
        warnings.warn(f"far_max={far_max:g} exceeds the achievable rate {top:g}; clamping", stacklevel=2)
        far_max = top
    return float(_partial_area(curve.rate, curve.pd, far_max) / far_max)


def median_over_runs(values) -> float:
    values = list(values)
    if not values:
        raise ValueError("median of no runs")
    return float(statistics.median(values))


# --------------------------------------------------------------------------
# delimited text I/O


def write_scores(scores: ScoreSet, path):
    n = len(scores)
    bag_ids = scores.bag_ids if scores.bag_ids is not None else [""] * n
    inst = scores.instance if scores.instance is not None else range(n)
    truth = scores.truth if scores.truth is not None else [""] * n
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "bag_id", "label", "score"])
        for i, b, t, s in zip(inst, bag_ids, truth, scores.scores):
            w.writerow([int(i), b, "" if t == "" else int(t), repr(float(s))])


def read_scores(path, area_m2: float | None = None) -> ScoreSet:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"score file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["instance", "bag_id", "label", "score"]:
        raise ValueError(f"malformed score file header in {path}")
    body = rows[1:]
    try:
        scores = np.array([float(r[3]) for r in body])
        labels = [r[2] for r in body]
        truth = None if any(l == "" for l in labels) else np.array([int(l) for l in labels])
        inst = np.array([int(r[0]) for r in body], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed row in {path}: {exc}") from exc
    return ScoreSet(scores, truth, np.array([r[1] for r in body], dtype=str), inst, area_m2)


def write_roc(curve: RocCurve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "pd", "fpr" if curve.units == FPR else "fa_per_m2"])
        for t, p, r in zip(curve.thresholds, curve.pd, curve.rate):
            w.writerow([repr(float(t)), repr(float(p)), repr(float(r))])
