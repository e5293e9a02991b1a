"""Outcome-blind grid search for the matching scale ``lam`` and caliper ``delta``."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .balance import compute_balance, matched_balance_data
from .data import Dataset, grid_from_range
from .errors import CaliperError, ConfigError, GpsMatchError, TuningError
from .gps import GpsSurface
from .matching import MatchConfig, build_matched_set
from .pipeline import exposure_window

UTILITIES = ("avg_abs_corr", "avg_blocked_std_bias")
_UTILITY_ALIASES = {"corr": "avg_abs_corr", "bias": "avg_blocked_std_bias"}
DEFAULT_LAMBDAS = tuple(round(0.1 * k, 1) for k in range(11))
DEFAULT_LEVEL_COUNTS = (10, 20, 50, 100)


def default_deltas(lo: float, hi: float, counts: Sequence[int] = DEFAULT_LEVEL_COUNTS):
    """Calipers giving ``I`` levels over ``[lo, hi]`` for each ``I`` in ``counts``."""
    return tuple((hi - lo) / (2.0 * i) for i in counts)


@dataclass(frozen=True)
class TuningGrid:
    lambdas: tuple = DEFAULT_LAMBDAS
    deltas: Optional[tuple] = None
    utility: str = "avg_abs_corr"

    def __post_init__(self):
        utility = _UTILITY_ALIASES.get(self.utility, self.utility)
        if utility not in UTILITIES:
            raise ConfigError(f"utility must be one of {UTILITIES}, got {self.utility!r}")
        object.__setattr__(self, "utility", utility)
        lambdas = tuple(float(v) for v in self.lambdas)
        if not lambdas or any(not 0.0 <= v <= 1.0 for v in lambdas):
            raise ConfigError("lambda candidates must be a nonempty subset of [0, 1]")
        object.__setattr__(self, "lambdas", lambdas)
        if self.deltas is not None:
            deltas = tuple(float(v) for v in self.deltas)
            if not deltas or any(not v > 0 for v in deltas):
                raise ConfigError("delta candidates must be nonempty and positive")
            object.__setattr__(self, "deltas", deltas)


@dataclass(frozen=True)
class TuningResult:
    lam: float
    delta: float
    utility: float
    utility_name: str
    table: tuple  # (lambda, delta, utility) rows; utility is nan for failed pairs

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["lambda", "delta", "utility"])
            for lam, delta, u in self.table:
                writer.writerow([repr(lam), repr(delta), "" if np.isnan(u) else repr(u)])


def tune(design: Dataset, surface: GpsSurface, grid: TuningGrid = TuningGrid(),
         metric: str = "l1", matches_per_unit: int = 1, grid_trim: float = 0.0,
         n_jobs: int = 1) -> TuningResult:
    """Pick ``(lam, delta)`` minimizing a balance utility on the matched data.

    ``design`` must not carry outcomes. Ties go to the larger ``lam`` and
    then the smaller ``delta``.
    """
    if design.has_outcomes:
        raise ConfigError("tuning is outcome-blind; pass dataset.without_outcomes()")
    lo, hi = exposure_window(design.exposures, grid_trim)
    deltas = grid.deltas if grid.deltas is not None else default_deltas(lo, hi)
    pairs = [(lam, delta) for lam in grid.lambdas for delta in deltas]

    def score(pair):
        lam, delta = pair
        try:
            g = grid_from_range(lo, hi, delta)
            matched = build_matched_set(design, surface, g,
                                        MatchConfig(delta, lam, metric, matches_per_unit))
            report = compute_balance(matched_balance_data(matched))
        except CaliperError:
            raise
        except GpsMatchError:
            return float("nan")
        return float(getattr(report, grid.utility))

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            values = list(pool.map(score, pairs))
    else:
        values = [score(p) for p in pairs]

    table = tuple((lam, delta, u) for (lam, delta), u in zip(pairs, values))
    ok = [row for row in table if np.isfinite(row[2])]
    if not ok:
        raise TuningError("every (lambda, delta) candidate failed to produce a matched set")
    best = min(ok, key=lambda r: (r[2], -r[0], r[1]))
    return TuningResult(best[0], best[1], best[2], grid.utility, table)
