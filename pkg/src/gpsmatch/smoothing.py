"""Compactly supported kernels and kernel regression.

All kernels are symmetric probability densities on [-1, 1].
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError

_GAUSS_MASS = math.erf(1.0 / math.sqrt(2.0))  # P(|Z| <= 1)


def uniform_kernel(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.5, 0.0)


def epanechnikov_kernel(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def gaussian_kernel(u):
    """Standard normal density truncated to [-1, 1] and renormalized."""
    u = np.asarray(u, dtype=float)
    dens = np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi) / _GAUSS_MASS
    return np.where(np.abs(u) <= 1.0, dens, 0.0)


KERNELS = {
    "uniform": uniform_kernel,
    "epanechnikov": epanechnikov_kernel,
    "gaussian": gaussian_kernel,
}


def get_kernel(name):
    if callable(name):
        return name
    try:
        return KERNELS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}") from None


def _weights(x, x_eval, h, kernel, weights):
    k = get_kernel(kernel)((np.asarray(x)[None, :] - np.asarray(x_eval)[:, None]) / h)
    if weights is not None:
        k = k * np.asarray(weights, dtype=float)[None, :]
    return k


def nadaraya_watson(x, y, x_eval, h, kernel="epanechnikov", weights=None):
    """Local-constant kernel regression; NaN where every kernel weight is zero."""
    if not h > 0:
        raise ConfigError("bandwidth must be positive")
    x_eval = np.atleast_1d(np.asarray(x_eval, dtype=float))
    out = np.empty(x_eval.shape[0])
    y = np.asarray(y, dtype=float)
    step = max(1, 2_000_000 // max(1, len(y)))
    for s in range(0, x_eval.shape[0], step):
        k = _weights(x, x_eval[s:s + step], h, kernel, weights)
        tot = k.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[s:s + step] = np.where(tot > 0, (k @ y) / tot, np.nan)
    return out


def local_linear(x, y, x_eval, h, kernel="epanechnikov", weights=None):
    """Local-linear kernel regression; NaN where the local fit is not identified."""
    if not h > 0:
        raise ConfigError("bandwidth must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x_eval = np.atleast_1d(np.asarray(x_eval, dtype=float))
    out = np.empty(x_eval.shape[0])
    step = max(1, 2_000_000 // max(1, len(y)))
    for s in range(0, x_eval.shape[0], step):
        xe = x_eval[s:s + step]
        k = _weights(x, xe, h, kernel, weights)
        d = x[None, :] - xe[:, None]
        s0 = k.sum(axis=1)
        s1 = (k * d).sum(axis=1)
        s2 = (k * d * d).sum(axis=1)
        t0 = k @ y
        t1 = (k * d) @ y
        det = s0 * s2 - s1 * s1
        ok = (s0 > 0) & (det > 1e-12 * np.maximum(s0 * s2, 1e-300))
        with np.errstate(invalid="ignore", divide="ignore"):
            out[s:s + step] = np.where(ok, (s2 * t0 - s1 * t1) / det, np.nan)
    return out


SMOOTHERS = {"nadaraya-watson": nadaraya_watson, "local-linear": local_linear}


def loo_cv_score(x, y, h, kernel="epanechnikov", weights=None, smoother="nadaraya-watson",
                 max_undefined=0.1):
    """Weighted mean squared leave-one-out prediction error.

    Points whose leave-one-out prediction is undefined (no neighbour inside
    the kernel support) are skipped; if more than ``max_undefined`` of them
    are, the score is ``inf``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    sse = 0.0
    used = 0.0
    undefined = 0
    step = max(1, 1_000_000 // max(1, n))
    for s in range(0, n, step):
        rows = np.arange(s, min(n, s + step))
        k = _weights(x, x[rows], h, kernel, weights)
        k[np.arange(rows.size), rows] = 0.0
        if smoother == "nadaraya-watson":
            tot = k.sum(axis=1)
            ok = tot > 0
            with np.errstate(invalid="ignore", divide="ignore"):
                pred = (k @ y) / tot
        else:
            d = x[None, :] - x[rows][:, None]
            kd = k * d
            s0, s1, s2 = k.sum(axis=1), kd.sum(axis=1), (kd * d).sum(axis=1)
            det = s0 * s2 - s1 * s1
            ok = (s0 > 0) & (det > 1e-12 * np.maximum(s0 * s2, 1e-300))
            with np.errstate(invalid="ignore", divide="ignore"):
                pred = (s2 * (k @ y) - s1 * (kd @ y)) / det
        undefined += int((~ok).sum())
        wr = w[rows][ok]
        sse += float(np.sum(wr * (y[rows][ok] - pred[ok]) ** 2))
        used += float(wr.sum())
    if undefined > max_undefined * n or used <= 0:
        return math.inf
    return sse / used


def select_bandwidth(x, y, lower, upper, n_candidates=20, kernel="epanechnikov",
                     weights=None, smoother="nadaraya-watson", max_undefined=0.1):
    """Leave-one-out cross-validated bandwidth over a log-spaced candidate set.

    Returns ``(bandwidth, scores)``. When no candidate yields finite scores
    the largest candidate is returned.
    """
    if not (lower > 0 and upper >= lower):
        raise ConfigError(f"invalid bandwidth range [{lower}, {upper}]")
    cands = np.geomspace(lower, upper, n_candidates) if upper > lower else np.array([lower])
    scores = np.array([loo_cv_score(x, y, h, kernel, weights, smoother, max_undefined)
                       for h in cands])
    if not np.isfinite(scores).any():
        return float(cands[-1]), scores
    return float(cands[int(np.argmin(scores))]), scores
