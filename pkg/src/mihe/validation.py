"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from .data import BagDataset, DatasetError, parse_label


def check_labels(y) -> np.ndarray:
    """Coerce bag labels given as 0/1, -1/+1, booleans or '+'/'-' tokens to 0/1 ints."""
    y = column_or_1d(np.asarray(y, dtype=object), warn=True)
    out = np.empty(y.shape[0], dtype=np.int64)
    for i, v in enumerate(y):
        if isinstance(v, (int, np.integer, float, np.floating)) and not isinstance(v, bool) and v == -1:
            out[i] = 0
        elif isinstance(v, (float, np.floating)) and v in (0.0, 1.0):
            out[i] = int(v)
        else:
            out[i] = parse_label(v)
    return out


def check_bags(bags, y=None) -> BagDataset:
    """Validate bags and labels into a :class:`BagDataset`.

    ``bags`` is either a ready ``BagDataset`` (``y`` must be None) or a
    sequence of ``(n_i, d)`` array-likes with one label each.
    """
    if isinstance(bags, BagDataset):
        if y is not None:
            raise ValueError("labels are taken from the BagDataset; pass y=None")
        return bags
    if y is None:
        raise ValueError("bag labels y are required")
    labels = check_labels(y)
    if len(bags) != labels.shape[0]:
        raise ValueError(f"got {len(bags)} bags but {labels.shape[0]} labels")
    arrays = []
    for i, bag in enumerate(bags):
        a = np.asarray(bag, dtype=np.float64)
        if a.ndim == 1:
            a = a[None, :]
        if a.shape[0] == 0:
            raise DatasetError(f"bag {i} has zero instances")
        arrays.append(check_array(a, dtype=np.float64))
    return BagDataset.from_arrays(arrays, labels)


def check_instances(X, n_bands: int | None = None) -> np.ndarray:
    """Validate an ``(N, d)`` instance matrix, optionally against a band count."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=1)
    if n_bands is not None and X.shape[1] != n_bands:
        raise ValueError(f"X has {X.shape[1]} bands; the model expects {n_bands}")
    return X
