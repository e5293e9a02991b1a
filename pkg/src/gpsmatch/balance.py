"""Covariate-balance diagnostics on raw and matched data.

Two measures are reported per covariate: the absolute (weighted) correlation
with the exposure, and for every exposure block the absolute difference
between the block mean and the mean outside the block, both on standardized
covariates. Matched data enter with multiplicity weights: unit ``k`` counts
``K_i(k)`` times in block ``i``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, ExposureGrid
from .errors import BlockError, ConfigError, OrthogonalizationError
from .matching import MatchedSet

CORRELATION_THRESHOLD = 0.1
BLOCK_BIAS_THRESHOLD = 0.2
MAX_CONDITION = 1e12
WHITENING = ("diagonal", "symmetric")


def _weights(n, weights):
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not w.sum() > 0:
        raise ConfigError("weights must be non-negative with a positive total")
    return w


def orthogonalize(covariates, exposures, weights=None, method: str = "symmetric",
                  names: Optional[Sequence[str]] = None):
    """Centre and whiten covariates and exposure under the given weights.

    Means and covariances are weighted and normalized by the total weight.
    ``method="symmetric"`` multiplies by the symmetric inverse square root of
    the covariance (so the result has identity covariance); ``"diagonal"``
    divides each column by its own standard deviation. Both refuse a
    covariance whose condition number exceeds ``1e12``.

    Returns ``(C_star, W_star)``.
    """
    c = np.asarray(covariates, dtype=float)
    if c.ndim == 1:
        c = c[:, None]
    x = np.asarray(exposures, dtype=float)
    wt = _weights(c.shape[0], weights)
    total = wt.sum()
    cc = c - (wt @ c) / total
    xc = x - (wt @ x) / total
    s_w = float(wt @ (xc * xc)) / total
    if not s_w > 0:
        raise OrthogonalizationError("exposure has zero weighted variance")
    s_c = (cc * wt[:, None]).T @ cc / total
    evals, evecs = np.linalg.eigh(s_c)
    labels = list(names) if names is not None else [f"c{k + 1}" for k in range(c.shape[1])]
    if evals[0] <= 0 or evals[-1] / evals[0] > MAX_CONDITION:
        null = evecs[:, 0]
        involved = [labels[k] for k in np.flatnonzero(np.abs(null) > 1e-6)]
        raise OrthogonalizationError(
            f"covariate covariance is singular or ill-conditioned; null direction involves {involved}"
        )
    if method == "symmetric":
        root = (evecs / np.sqrt(evals)) @ evecs.T
        c_star = cc @ root
    elif method == "diagonal":
        c_star = cc / np.sqrt(np.diag(s_c))
    else:
        raise ConfigError(f"whitening must be one of {WHITENING}, got {method!r}")
    return c_star, xc / np.sqrt(s_w)


def absolute_correlation(covariates, exposures, weights=None, whitening: str = "diagonal",
                         names=None) -> np.ndarray:
    """``|sum_k n_k C*_k W*_k| / sum_k n_k`` per covariate.

    With the default per-column standardization and unit weights this is the
    absolute Pearson correlation.
    """
    c_star, w_star = orthogonalize(covariates, exposures, weights, whitening, names)
    wt = _weights(c_star.shape[0], weights)
    corr = np.abs((wt * w_star) @ c_star) / wt.sum()
    return np.minimum(corr, 1.0)


def blocked_std_bias(covariates, exposures, blocks, n_blocks: int, weights=None,
                     whitening: str = "diagonal", names=None) -> np.ndarray:
    """``I x q`` matrix of absolute standardized mean differences.

    Row ``i`` compares the weighted mean of the standardized covariates in
    block ``i`` with the weighted mean over all other blocks. Rows for empty
    blocks are NaN.
    """
    if n_blocks < 2:
        raise BlockError(f"need at least 2 blocks, got {n_blocks}")
    c_star, _ = orthogonalize(covariates, exposures, weights, whitening, names)
    wt = _weights(c_star.shape[0], weights)
    blocks = np.asarray(blocks, dtype=np.int64)
    if blocks.shape[0] != c_star.shape[0] or np.any((blocks < 0) | (blocks >= n_blocks)):
        raise BlockError("block labels must lie in [0, n_blocks)")
    mass = np.bincount(blocks, weights=wt, minlength=n_blocks)
    sums = np.zeros((n_blocks, c_star.shape[1]))
    np.add.at(sums, blocks, c_star * wt[:, None])
    total_mass, total_sum = mass.sum(), sums.sum(axis=0)
    out = np.full(sums.shape, np.nan)
    for i in np.flatnonzero((mass > 0) & (total_mass - mass > 0)):
        inside = sums[i] / mass[i]
        outside = (total_sum - sums[i]) / (total_mass - mass[i])
        out[i] = np.abs(inside - outside)
    return out


@dataclass(frozen=True, eq=False)
class BalanceData:
    """Weighted, blocked covariate/exposure rows for the balance measures."""

    covariates: np.ndarray
    exposures: np.ndarray
    weights: np.ndarray
    blocks: np.ndarray
    n_blocks: int
    names: tuple


def raw_balance_data(dataset: Dataset, grid: ExposureGrid) -> BalanceData:
    """Raw units with unit weights, blocked by the grid."""
    blocks = grid.assign_blocks(dataset.exposures)
    blocks = np.maximum(blocks, 0)
    return BalanceData(dataset.covariates, dataset.exposures, np.ones(dataset.n), blocks,
                       grid.count, dataset.covariate_names)


def matched_balance_data(matched: MatchedSet) -> BalanceData:
    """Matched units at every matched level, weighted by multiplicity.

    A unit used at level ``i`` sits in block ``i`` with its own covariates
    and observed exposure.
    """
    ds = matched.dataset
    rows, blocks, weights = [], [], []
    for i in np.flatnonzero(matched.matched):
        used = np.flatnonzero(matched.multiplicity[i])
        rows.append(used)
        blocks.append(np.full(used.size, i))
        weights.append(matched.multiplicity[i][used])
    idx = np.concatenate(rows)
    return BalanceData(ds.covariates[idx], ds.exposures[idx],
                       np.concatenate(weights).astype(float), np.concatenate(blocks),
                       matched.grid.count, ds.covariate_names)


@dataclass(frozen=True, eq=False)
class BalanceReport:
    per_covariate_abs_corr: np.ndarray
    avg_abs_corr: float
    blocked_std_bias: np.ndarray
    avg_blocked_std_bias: float
    covariate_names: tuple
    thresholds: tuple = (CORRELATION_THRESHOLD, BLOCK_BIAS_THRESHOLD)

    @property
    def covariate_pass(self) -> np.ndarray:
        return self.per_covariate_abs_corr < self.thresholds[0]

    @property
    def block_pass(self) -> np.ndarray:
        """Per block: every covariate below the block threshold (empty blocks pass)."""
        b = self.blocked_std_bias
        return np.all(np.isnan(b) | (b < self.thresholds[1]), axis=1)

    @property
    def balanced(self) -> bool:
        return bool(self.covariate_pass.all() and self.block_pass.all())

    def to_dict(self) -> dict:
        def clean(a):
            return [None if np.isnan(v) else float(v) for v in np.ravel(a)]

        return {
            "covariates": list(self.covariate_names),
            "abs_corr": clean(self.per_covariate_abs_corr),
            "avg_abs_corr": float(self.avg_abs_corr),
            "blocked_std_bias": [clean(row) for row in self.blocked_std_bias],
            "avg_blocked_std_bias": float(self.avg_blocked_std_bias),
            "thresholds": {"abs_corr": self.thresholds[0], "blocked_std_bias": self.thresholds[1]},
            "covariate_pass": [bool(v) for v in self.covariate_pass],
            "block_pass": [bool(v) for v in self.block_pass],
        }


def compute_balance(data: BalanceData, thresholds=(CORRELATION_THRESHOLD, BLOCK_BIAS_THRESHOLD),
                    whitening: str = "diagonal") -> BalanceReport:
    corr = absolute_correlation(data.covariates, data.exposures, data.weights, whitening,
                                data.names)
    bias = blocked_std_bias(data.covariates, data.exposures, data.blocks, data.n_blocks,
                            data.weights, whitening, data.names)
    with np.errstate(invalid="ignore"):
        per_cov_bias = np.nanmean(bias, axis=0) if np.isfinite(bias).any() else np.full(
            bias.shape[1], np.nan)
    return BalanceReport(corr, float(corr.mean()), bias, float(np.mean(per_cov_bias)),
                         tuple(data.names), tuple(thresholds))


@dataclass(frozen=True, eq=False)
class BalanceComparison:
    pre: BalanceReport
    post: BalanceReport

    def to_dict(self) -> dict:
        return {"pre": self.pre.to_dict(), "post": self.post.to_dict()}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["covariate", "pre_abs_corr", "post_abs_corr"])
            for name, a, b in zip(self.pre.covariate_names, self.pre.per_covariate_abs_corr,
                                  self.post.per_covariate_abs_corr):
                writer.writerow([name, repr(float(a)), repr(float(b))])


def balance_report(raw: Dataset, matched: MatchedSet,
                   thresholds=(CORRELATION_THRESHOLD, BLOCK_BIAS_THRESHOLD),
                   whitening: str = "diagonal") -> BalanceComparison:
    """Balance before (unit weights, grid blocks) and after matching."""
    pre = compute_balance(raw_balance_data(raw, matched.grid), thresholds, whitening)
    post = compute_balance(matched_balance_data(matched), thresholds, whitening)
    return BalanceComparison(pre, post)
