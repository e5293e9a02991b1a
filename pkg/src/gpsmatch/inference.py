"""m-out-of-n bootstrap Wald bands for the smoothed matching curve."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.stats import norm

from .data import Dataset, ExposureGrid
from .errors import ConfigError, GpsMatchError
from .estimators import ErfEstimate, default_bandwidth_range, matching_point_estimates
from .gps import fit_gps, gps_surface
from .pipeline import PipelineConfig, run_design, run_matching_pipeline
from .smoothing import nadaraya_watson, select_bandwidth
from .tuning import TuningGrid, tune


def default_subsample_size(n: int) -> int:
    return int(math.ceil(n**0.8))


@dataclass(frozen=True)
class BootstrapConfig:
    """``m=None`` means ``ceil(N^0.8)``.

    ``retune=True`` re-selects ``lam`` on every replicate by the balance
    utility; the caliper stays fixed so that all replicates share the grid.
    """

    replicates: int = 200
    m: Optional[int] = None
    seed: int = 0
    level: float = 0.95
    retune: bool = False
    fixed_bandwidth: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if int(self.replicates) != self.replicates or self.replicates < 2:
            raise ConfigError("bootstrap needs at least 2 replicates")
        if self.m is not None and (int(self.m) != self.m or self.m < 2):
            raise ConfigError("subsample size m must be an integer >= 2")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("confidence level must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class BootstrapBand:
    """Per-level bootstrap summary; NaN where the band is undefined."""

    levels: np.ndarray
    estimate: np.ndarray
    sd: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    successes: np.ndarray
    m: int
    replicates: int
    samples: np.ndarray  # (B, I) replicate curves, NaN where missing

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.ci_lo)


def _replicate_curve(dataset, index, config: PipelineConfig, grid: ExposureGrid,
                     bandwidth: float, kernel: str, retune: bool = False) -> np.ndarray:
    out = np.full(grid.count, np.nan)
    try:
        sample = dataset.subset(index)
        if retune:
            config = _retuned(sample, config, grid)
        design = run_design(sample, config, grid=grid)
    except GpsMatchError:
        return out
    matched = design.matched.with_outcomes(sample)
    point = matching_point_estimates(matched)
    levels = grid.levels[matched.matched]
    if bandwidth is None:
        if levels.size < 2:
            return out
        lower, upper = default_bandwidth_range(grid.caliper, (grid.origin, grid.levels[-1] + grid.caliper))
        bandwidth, _ = select_bandwidth(levels, point, lower, upper, 20, kernel)
    out[matched.matched] = nadaraya_watson(levels, point, levels, bandwidth, kernel)
    return out


def _retuned(sample: Dataset, config: PipelineConfig, grid: ExposureGrid) -> PipelineConfig:
    design = sample.without_outcomes()
    model = fit_gps(design, config.learner, **config.learner_params)
    best = tune(design, gps_surface(model, design), TuningGrid(deltas=(grid.caliper,)),
                config.metric, config.matches_per_unit, config.grid_trim)
    return replace(config, lam=best.lam)


def bootstrap_band(dataset: Dataset, config: PipelineConfig = PipelineConfig(),
                   boot: BootstrapConfig = BootstrapConfig(),
                   full: Optional[ErfEstimate] = None,
                   grid: Optional[ExposureGrid] = None) -> BootstrapBand:
    """Pointwise Wald band ``est +/- z * sqrt(m / N) * sd_b`` on the full-data grid.

    Each replicate draws ``m`` units with replacement, refits the GPS and
    rematches on the full-data grid with the full-data caliper and ``lam``
    (unless ``retune``). A cross-validated bandwidth is re-selected in each
    replicate; a fixed one is reused. Replicates leaving a level unmatched contribute no
    value there; a level with fewer than ``B / 2`` values has no band.
    """
    n = dataset.n
    m = boot.m if boot.m is not None else default_subsample_size(n)
    if m > n:
        raise ConfigError(f"subsample size m={m} exceeds N={n}")
    if full is None or grid is None:
        result = run_matching_pipeline(dataset, config)
        full, grid = result.estimate, result.design.grid
    if full.bandwidth is None:
        raise ConfigError("the full-data estimate must be smoothed")
    kernel = full.kernel
    # a bandwidth chosen by cross-validation is re-chosen in every replicate
    bandwidth = config.bandwidth if (boot.fixed_bandwidth or config.bandwidth) else None
    if boot.fixed_bandwidth:
        bandwidth = full.bandwidth
    fixed = replace(config, delta=grid.caliper)

    # full-data smoothed estimate on every grid level (NaN for unmatched levels)
    estimate = np.full(grid.count, np.nan)
    pos = np.searchsorted(grid.levels, full.levels)
    estimate[pos] = full.smoothed

    def one(b):
        rng = np.random.default_rng(np.random.SeedSequence([boot.seed, b]))
        index = rng.integers(0, n, size=m)
        with np.errstate(all="ignore"):
            return _replicate_curve(dataset, index, fixed, grid, bandwidth, kernel, boot.retune)

    if boot.n_jobs and boot.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=boot.n_jobs) as pool:
            samples = np.vstack(list(pool.map(one, range(boot.replicates))))
    else:
        samples = np.vstack([one(b) for b in range(boot.replicates)])

    successes = np.isfinite(samples).sum(axis=0)
    sd = np.full(grid.count, np.nan)
    ok = (successes >= boot.replicates / 2) & (successes >= 2) & np.isfinite(estimate)
    if ok.any():
        sd[ok] = np.nanstd(samples[:, ok], axis=0, ddof=1)
    z = float(norm.ppf(0.5 + boot.level / 2))
    half = z * math.sqrt(m / n) * sd
    return BootstrapBand(grid.levels.copy(), estimate, sd, estimate - half, estimate + half,
                         successes, m, boot.replicates, samples)


def with_band(estimate: ErfEstimate, band: BootstrapBand) -> ErfEstimate:
    """Attach band limits to an estimate on the same levels."""
    pos = np.searchsorted(band.levels, estimate.levels)
    return replace(estimate, ci_lo=band.ci_lo[pos], ci_hi=band.ci_hi[pos])
