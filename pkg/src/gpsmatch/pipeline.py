"""End-to-end matching pipeline: design stage then analysis stage.

The design stage (GPS fit, grid, matching) only ever sees a view of the data
without outcomes; outcomes are attached afterwards for estimation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import DEFAULT_GPS_FLOOR, AssumptionReport, Dataset, ExposureGrid, grid_from_range
from .errors import ConfigError, DataError
from .estimators import ErfEstimate, matching_estimate, smooth_erf, with_plug_in_variance
from .gps import GpsModel, GpsSurface, canonical_learner, fit_gps, gps_surface
from .matching import MatchConfig, MatchedSet, build_matched_set

CALIPER_CONSTANT = 2.0


def default_caliper(exposures) -> float:
    """Rule-of-thumb caliper ``2 * IQR(W) * N^(-1/2)``.

    Shrinks at the root-N rate so that bias vanishes while every caliper
    window still collects on the order of root-N units. The result is capped
    just below half of the exposure range so the grid is never empty.
    """
    w = np.asarray(exposures, dtype=float)
    q75, q25 = np.percentile(w, [75, 25])
    iqr = q75 - q25
    if not iqr > 0:
        iqr = float(np.std(w))
    delta = CALIPER_CONSTANT * iqr / math.sqrt(w.shape[0])
    span = float(w.max() - w.min())
    return min(delta, 0.49 * span)


def exposure_window(exposures, trim: float = 0.0) -> tuple[float, float]:
    """Exposure range with ``trim`` of the mass removed from each tail."""
    w = np.asarray(exposures, dtype=float)
    if trim <= 0:
        return float(w.min()), float(w.max())
    lo, hi = np.quantile(w, [trim, 1.0 - trim])
    return float(lo), float(hi)


def design_grid(dataset: Dataset, delta: Optional[float] = None, trim: float = 0.0
                ) -> ExposureGrid:
    """Grid over the (optionally trimmed) exposure range; default caliper if none given."""
    lo, hi = exposure_window(dataset.exposures, trim)
    if delta is None:
        delta = min(default_caliper(dataset.exposures), 0.49 * (hi - lo))
    return grid_from_range(lo, hi, delta)


@dataclass(frozen=True)
class PipelineConfig:
    """Settings for one run of the matching estimator.

    ``delta=None`` uses :func:`default_caliper`; ``bandwidth=None`` selects the
    smoothing bandwidth by leave-one-out cross-validation. ``grid_trim`` drops
    that fraction of exposure mass in each tail before laying out the grid.
    """

    lam: float = 1.0
    delta: Optional[float] = None
    metric: str = "l1"
    matches_per_unit: int = 1
    gps_caliper: Optional[float] = None
    learner: str = "normal-linear"
    learner_params: dict = field(default_factory=dict)
    kernel: str = "epanechnikov"
    bandwidth: Optional[float] = None
    grid_trim: float = 0.01
    n_jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "learner", canonical_learner(self.learner))
        if not 0.0 <= self.grid_trim < 0.5:
            raise ConfigError("grid_trim must lie in [0, 0.5)")
        if self.delta is not None and not self.delta > 0:
            raise ConfigError("delta must be positive")

    def match_config(self, delta: float) -> MatchConfig:
        return MatchConfig(delta, self.lam, self.metric, self.matches_per_unit, self.gps_caliper)


@dataclass(frozen=True, eq=False)
class DesignResult:
    """Outcome-free products of the design stage."""

    model: GpsModel
    surface: GpsSurface
    grid: ExposureGrid
    matched: MatchedSet


@dataclass(frozen=True, eq=False)
class PipelineResult:
    design: DesignResult
    matched: MatchedSet
    estimate: ErfEstimate


def run_design(dataset: Dataset, config: PipelineConfig = PipelineConfig(),
               model: Optional[GpsModel] = None, grid: Optional[ExposureGrid] = None
               ) -> DesignResult:
    """Fit the GPS (unless given), build the grid and match, all outcome-blind."""
    design = dataset.without_outcomes() if dataset.has_outcomes else dataset
    if model is None:
        model = fit_gps(design, config.learner, **config.learner_params)
    surface = gps_surface(model, design)
    if grid is None:
        grid = design_grid(design, config.delta, config.grid_trim)
    matched = build_matched_set(design, surface, grid, config.match_config(grid.caliper),
                                n_jobs=config.n_jobs)
    return DesignResult(model, surface, grid, matched)


def run_matching_pipeline(dataset: Dataset, config: PipelineConfig = PipelineConfig(),
                          model: Optional[GpsModel] = None,
                          grid: Optional[ExposureGrid] = None,
                          variance: bool = False) -> PipelineResult:
    """Design stage, then per-level estimates and kernel smoothing across levels."""
    if not dataset.has_outcomes:
        raise DataError("the analysis stage needs outcomes")
    design = run_design(dataset, config, model, grid)
    matched = design.matched.with_outcomes(dataset)
    estimate = matching_estimate(matched)
    if estimate.levels.shape[0] >= 2:
        estimate = smooth_erf(estimate, config.kernel, config.bandwidth)
    if variance:
        estimate = with_plug_in_variance(estimate, matched)
    return PipelineResult(design, matched, estimate)


def check_assumptions(dataset: Dataset, surface: GpsSurface, grid: ExposureGrid,
                      matched: Optional[MatchedSet] = None,
                      gps_floor: float = DEFAULT_GPS_FLOOR) -> AssumptionReport:
    """Empirical positivity diagnostics on the grid.

    A level is flagged when a unit in its block has an estimated GPS below
    ``gps_floor``. Unmatched levels come from ``matched`` when given,
    otherwise they are the levels whose caliper window holds no unit.
    """
    blocks = grid.assign_blocks(dataset.exposures)
    low = surface.observed_gps < gps_floor
    flags = np.zeros(grid.count, dtype=bool)
    inside = blocks >= 0
    np.logical_or.at(flags, blocks[inside], low[inside])
    if matched is not None:
        unmatched = matched.unmatched_levels
    else:
        w = np.sort(dataset.exposures)
        lo = np.searchsorted(w, grid.levels - grid.caliper, side="left")
        hi = np.searchsorted(w, grid.levels + grid.caliper, side="right")
        unmatched = [float(v) for v in grid.levels[hi == lo]]
    return AssumptionReport(flags, gps_floor, unmatched)
