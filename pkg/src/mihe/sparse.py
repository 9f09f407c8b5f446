"""Lasso sparse coding by iterative shrinkage-thresholding (ISTA).

Solves ``min_a 0.5 * ||x - D a||^2 + lam * ||a||_1`` for many signals against a
shared dictionary. Signals are rows of ``X``; dictionary atoms are columns of
``D``.

Every per-signal quantity is computed with row-local elementwise operations
and reductions, so a signal's code does not depend on which other signals
share the batch: ``batch_solve`` is bit-identical to looping ``ista_solve``.
"""

from __future__ import annotations

import numpy as np

DEFAULT_ITERS = 200
DEFAULT_TOL = 1e-6


class ISTAError(ValueError):
    """Raised for degenerate dictionaries or non-finite signals."""


def soft_threshold(z, t, nonneg=False):
    """Proximal operator of ``t * ||.||_1`` (projected onto ``z >= 0`` if ``nonneg``)."""
    if nonneg:
        return np.maximum(z - t, 0.0)
    return z - np.clip(z, -t, t)


def correlate(D, X):
    """``X @ D`` computed row by row, shape ``(N, m)``."""
    X = np.atleast_2d(X)
    out = np.empty((X.shape[0], D.shape[1]))
    for k in range(D.shape[1]):
        out[:, k] = (X * D[:, k]).sum(axis=1)
    return out


def _gram_apply(G, A):
    # G @ A for A of shape (m, n), accumulated term by term so that each
    # signal's column is computed identically whatever n is.
    out = np.empty_like(A)
    for i in range(G.shape[0]):
        acc = G[i, 0] * A[0]
        for k in range(1, G.shape[0]):
            acc = acc + G[i, k] * A[k]
        out[i] = acc
    return out


def _objective_t(A, AG, C, xx, lam):
    obj = 0.5 * xx
    for k in range(A.shape[0]):
        obj += A[k] * (0.5 * AG[k] - C[k]) + lam * np.abs(A[k])
    return obj


def lipschitz_constant(D) -> float:
    """Squared spectral norm of ``D``: the gradient Lipschitz constant of the data term."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[1] < 1:
        raise ISTAError(f"dictionary must be a 2-D array with at least one column, got shape {D.shape}")
    if not np.all(np.isfinite(D)):
        raise ISTAError("dictionary contains non-finite values")
    if np.any(~D.any(axis=0)):
        raise ISTAError("dictionary has an all-zero column")
    return float(np.linalg.norm(D, 2) ** 2)


def lasso_objective(D, X, A, lam):
    """Per-signal Lasso objective, computed from explicit residuals."""
    X = np.atleast_2d(X)
    A = np.atleast_2d(A)
    R = X - A @ D.T
    return 0.5 * (R * R).sum(axis=1) + lam * np.abs(A).sum(axis=1)


def batch_solve(D, X, lam, iters=DEFAULT_ITERS, tol=DEFAULT_TOL, init=None, nonneg=False,
                L=None, check_monotone=False, return_history=False):
    """Solve one Lasso problem per row of ``X``.

    Parameters
    ----------
    D : ndarray of shape (d, m)
        Dictionary with nonzero columns.
    X : ndarray of shape (N, d)
        Signals.
    lam : float
        Nonnegative l1 weight.
    iters : int
        Maximum number of ISTA steps per signal.
    tol : float
        A signal stops once one step lowers its objective by less than ``tol``.
    init : ndarray of shape (N, m), optional
        Warm start; zeros by default.
    nonneg : bool
        Restrict codes to the nonnegative orthant.
    L : float, optional
        Step is ``1 / L``; defaults to the squared spectral norm of ``D``.
    check_monotone : bool
        Raise ``AssertionError`` if any step increases an objective beyond
        rounding.
    return_history : bool
        Also return the ``(n_steps + 1, N)`` objective history.

    Returns
    -------
    codes : ndarray of shape (N, m)
    objective : ndarray of shape (N,)
        Final Lasso objective of each signal.
    n_iter : ndarray of shape (N,)
        Steps taken by each signal.
    """
    D = np.asarray(D, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if D.ndim != 2 or X.shape[1] != D.shape[0]:
        raise ISTAError(f"signal length {X.shape[1]} does not match dictionary rows {D.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ISTAError("signal contains non-finite values")
    if lam < 0:
        raise ISTAError("lam must be nonnegative")
    if L is None:
        L = lipschitz_constant(D)
    N, m = X.shape[0], D.shape[1]

    G = D.T @ D
    # Work in (m, N) layout: signals along the contiguous axis.
    C_all = correlate(D, X).T.copy()
    xx_all = (X * X).sum(axis=1)
    if init is None:
        A_all = np.zeros((m, N))
    else:
        A_all = np.array(init, dtype=np.float64).reshape(N, m).T.copy()
    n_iter = np.zeros(N, dtype=np.int64)

    idx = np.arange(N)
    A, C, xx = A_all, C_all, xx_all
    AG = _gram_apply(G, A)
    obj = _objective_t(A, AG, C, xx, lam)
    obj_all = obj.copy()
    history = [obj_all.copy()] if return_history else None
    thresh = lam / L
    n_run = 0
    for n_run in range(1, iters + 1):
        A_new = soft_threshold(A - (AG - C) / L, thresh, nonneg)
        AG_new = _gram_apply(G, A_new)
        obj_new = _objective_t(A_new, AG_new, C, xx, lam)
        if check_monotone:
            slack = 1e-12 * (1.0 + np.abs(obj))
            bad = obj_new > obj + slack
            if np.any(bad):
                raise AssertionError(f"ISTA objective increased for {int(bad.sum())} signal(s)")
        done = (obj - obj_new) < tol
        A, AG, obj = A_new, AG_new, obj_new
        if return_history:
            obj_all[idx] = obj
            history.append(obj_all.copy())
        if done.any():
            stopped = idx[done]
            A_all[:, stopped] = A[:, done]
            obj_all[stopped] = obj[done]
            n_iter[stopped] = n_run
            keep = ~done
            idx = idx[keep]
            A, AG, obj, C, xx = A[:, keep], AG[:, keep], obj[keep], C[:, keep], xx[keep]
            if idx.size == 0:
                break
    A_all[:, idx] = A
    obj_all[idx] = obj
    n_iter[idx] = n_run
    codes = A_all.T.copy()
    if return_history:
        return codes, obj_all, n_iter, np.array(history)
    return codes, obj_all, n_iter


def ista_solve(D, x, lam, iters=DEFAULT_ITERS, tol=DEFAULT_TOL, init=None, nonneg=False, **kwargs):
    """Solve a single Lasso problem; returns ``(code, objective)``.

    Extra keyword arguments are passed to :func:`batch_solve`.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ISTAError("ista_solve takes a single 1-D signal; use batch_solve for many")
    init = None if init is None else np.asarray(init, dtype=np.float64)[None, :]
    out = batch_solve(D, x[None, :], lam, iters, tol, init, nonneg, **kwargs)
    if kwargs.get("return_history"):
        return out[0][0], out[1][0], out[3][:, 0]
    return out[0][0], out[1][0]
