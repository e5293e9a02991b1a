"""Caliper matching on standardized exposure and standardized GPS.

For every exposure level ``w`` and every target unit ``j'`` the matcher looks
among the units whose observed exposure lies in ``[w - delta, w + delta]`` for
the one whose point ``(lam * e*, (1 - lam) * w*)`` is closest to the target's
point ``(lam * e*(w, c_j'), (1 - lam) * w*)``. Matching is with replacement;
the number of times unit ``j`` is used at level ``i`` is its multiplicity
``K_i(j)``.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, ExposureGrid
from .errors import ConfigError, PipelineError, StandardizationError
from .gps import GpsSurface

METRICS = ("l1", "l2")
_CHUNK_CELLS = 2_000_000


@dataclass(frozen=True)
class MatchConfig:
    """Matching settings.

    ``lam`` weights the GPS coordinate (``lam = 1`` matches on GPS only,
    ``lam = 0`` on exposure only). ``gps_caliper`` optionally rejects
    candidates farther than this in standardized GPS.
    """

    delta: float
    lam: float = 1.0
    metric: str = "l1"
    matches_per_unit: int = 1
    gps_caliper: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not self.delta > 0:
            raise ConfigError(f"caliper must be positive, got {self.delta}")
        metric = self.metric.lower()
        if metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        object.__setattr__(self, "metric", metric)
        if int(self.matches_per_unit) != self.matches_per_unit or self.matches_per_unit < 1:
            raise ConfigError("matches_per_unit must be an integer >= 1")
        if self.gps_caliper is not None and not self.gps_caliper > 0:
            raise ConfigError("gps_caliper must be positive when given")


def standardize(values) -> np.ndarray:
    """Min-max scale a vector onto [0, 1]."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise StandardizationError("cannot standardize an empty vector")
    lo, hi = v.min(), v.max()
    if not hi > lo:
        raise StandardizationError("cannot standardize a constant vector")
    return (v - lo) / (hi - lo)


def metric_distance(d_gps, d_exposure, lam, metric):
    """Distance between points whose standardized coordinates differ by the arguments."""
    a = lam * np.abs(d_gps)
    b = (1.0 - lam) * np.abs(d_exposure)
    if metric == "l1":
        return a + b
    return np.sqrt(a * a + b * b)


def _coordinates(dataset: Dataset, surface: GpsSurface):
    if surface.degenerate:
        raise StandardizationError("GPS surface is degenerate; cannot standardize")
    w_lo, w_hi = dataset.exposure_range
    w_star = (dataset.exposures - w_lo) / (w_hi - w_lo)
    e_star = surface.standardize(surface.observed_gps)
    return w_star, e_star, w_lo, w_hi


def match_at_level(level: float, dataset: Dataset, surface: GpsSurface,
                   config: MatchConfig, _coords=None) -> Optional[np.ndarray]:
    """Indices of the matched units for every target at one exposure level.

    Returns an ``(N, M)`` integer array, or ``None`` when the caliper around
    ``level`` holds fewer than ``M`` units (the level is unmatched). With a GPS
    caliper, targets without an admissible candidate get index -1. Ties go to
    the lowest candidate index.
    """
    w_star, e_star, w_lo, w_hi = _coords or _coordinates(dataset, surface)
    w = dataset.exposures
    cand = np.flatnonzero(np.abs(w - level) <= config.delta)
    m = config.matches_per_unit
    if cand.size < m:
        return None
    target_e = surface.standardize(surface.model.evaluate(level, dataset.covariates))
    target_w = (level - w_lo) / (w_hi - w_lo)
    cand_e = e_star[cand]
    d_w = w_star[cand] - target_w  # identical for every target

    n = dataset.n
    out = np.empty((n, m), dtype=np.int64)
    step = max(1, _CHUNK_CELLS // cand.size)
    for start in range(0, n, step):
        stop = min(n, start + step)
        d_e = cand_e[None, :] - target_e[start:stop, None]
        dist = metric_distance(d_e, d_w[None, :], config.lam, config.metric)
        if config.gps_caliper is not None:
            dist = np.where(np.abs(d_e) <= config.gps_caliper, dist, np.inf)
        if m == 1:
            pick = np.argmin(dist, axis=1)[:, None]
        else:
            pick = np.argsort(dist, axis=1, kind="stable")[:, :m]
        chosen = cand[pick]
        if config.gps_caliper is not None:
            chosen[~np.isfinite(np.take_along_axis(dist, pick, axis=1))] = -1
        out[start:stop] = chosen
    return out


@dataclass(frozen=True, eq=False)
class MatchedSet:
    """Result of matching every unit at every grid level.

    Attributes
    ----------
    indices : (I, N, M) int array
        Matched unit indices per level and target; -1 on unmatched levels.
    multiplicity : (I, N) int array
        ``K_i(j)``, how often unit ``j`` serves as a match at level ``i``.
    imputed_outcomes : (I, N) float array or None
        Mean outcome of each target's matches; NaN on unmatched levels. None
        when the dataset carries no outcomes (design stage).
    matched : (I,) bool array
    """

    dataset: Dataset
    grid: ExposureGrid
    config: MatchConfig
    indices: np.ndarray
    multiplicity: np.ndarray
    imputed_outcomes: Optional[np.ndarray]
    matched: np.ndarray

    @property
    def unmatched_levels(self) -> list:
        return [float(v) for v in self.grid.levels[~self.matched]]

    @property
    def matched_levels(self) -> np.ndarray:
        return self.grid.levels[self.matched]

    def with_outcomes(self, dataset: Dataset) -> "MatchedSet":
        """Attach outcomes of a dataset with the same units (analysis stage)."""
        if dataset.n != self.dataset.n:
            raise ConfigError("dataset does not match the matched set")
        return MatchedSet(dataset, self.grid, self.config, self.indices, self.multiplicity,
                          _impute(self.indices, self.matched, dataset.outcomes), self.matched)

    def rows(self):
        """Iterate ``(level_index, target, match_indices)`` over matched levels."""
        for i in np.flatnonzero(self.matched):
            for j in range(self.dataset.n):
                yield i, j, self.indices[i, j]

    def to_csv(self, path) -> None:
        ds = self.dataset
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["level", "target_id", "matched_id", "matched_exposure",
                             "imputed_outcome", "multiplicity"])
            for i, j, picks in self.rows():
                level = repr(float(self.grid.levels[i]))
                for k in picks:
                    if k < 0:
                        continue
                    y = "" if self.imputed_outcomes is None else repr(float(self.imputed_outcomes[i, j]))
                    writer.writerow([level, ds.unit_ids[j], ds.unit_ids[k],
                                     repr(float(ds.exposures[k])), y,
                                     int(self.multiplicity[i, k])])


def _impute(indices, matched, outcomes):
    if outcomes is None:
        return None
    imputed = np.full(indices.shape[:2], np.nan)
    for i in np.flatnonzero(matched):
        idx = indices[i]
        ok = idx >= 0
        vals = np.where(ok, outcomes[np.where(ok, idx, 0)], 0.0)
        count = ok.sum(axis=1)
        with np.errstate(invalid="ignore"):
            imputed[i] = np.where(count > 0, vals.sum(axis=1) / np.maximum(count, 1), np.nan)
    return imputed


def build_matched_set(dataset: Dataset, surface: GpsSurface, grid: ExposureGrid,
                      config: MatchConfig, n_jobs: int = 1) -> MatchedSet:
    """Match all units at all grid levels.

    Levels are independent, so with ``n_jobs > 1`` they run on a thread pool;
    the result does not depend on scheduling.
    """
    coords = _coordinates(dataset, surface)
    n, m, n_levels = dataset.n, config.matches_per_unit, grid.count

    def one(i):
        return match_at_level(float(grid.levels[i]), dataset, surface, config, coords)

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, range(n_levels)))
    else:
        results = [one(i) for i in range(n_levels)]

    indices = np.full((n_levels, n, m), -1, dtype=np.int64)
    multiplicity = np.zeros((n_levels, n), dtype=np.int64)
    matched = np.zeros(n_levels, dtype=bool)
    for i, res in enumerate(results):
        if res is None:
            continue
        matched[i] = True
        indices[i] = res
        flat = res[res >= 0]
        multiplicity[i] = np.bincount(flat, minlength=n)
    if not matched.any():
        raise PipelineError("every exposure level is unmatched; nothing is estimable")
    for a in (indices, multiplicity, matched):
        a.setflags(write=False)
    imputed = _impute(indices, matched, dataset.outcomes)
    if imputed is not None:
        imputed.setflags(write=False)
    return MatchedSet(dataset, grid, config, indices, multiplicity, imputed, matched)
