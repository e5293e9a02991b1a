"""Monte-Carlo harness: six exposure mechanisms, a cubic outcome model and
integrated bias/MSE metrics for the matching estimator and its comparators.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, GpsMatchError
from .estimators import (OutcomeModelConfig, SmootherConfig, adjustment_estimate, dr_estimate,
                         iptw_estimate)
from .gps import fit_gps, gps_surface
from .pipeline import PipelineConfig, run_matching_pipeline

SCENARIOS = (1, 2, 3, 4, 5, 6)
METHODS = ("matching", "adjustment", "iptw", "dr")
COVARIATE_NAMES = ("c1", "c2", "c3", "c4", "c5", "c6")
DIVERGENCE_LIMIT = 1000.0

_GAMMA = np.array([0.1, 0.1, -0.1, 0.2, 0.1, 0.1])
_BETA = np.array([2.0, 2.0, 3.0, -1.0, 2.0, 2.0])
_SD5 = math.sqrt(5.0)


@dataclass(frozen=True)
class Scenario:
    """One data-generating process.

    ``c5_support`` is ``"integers"`` (uniform on -2..2) or ``"endpoints"``
    (uniform on {-2, 2}).
    """

    gps_dgp: int
    n: int = 1000
    seed: int = 0
    c5_support: str = "integers"

    def __post_init__(self):
        if self.gps_dgp not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.gps_dgp}")
        if int(self.n) != self.n or self.n < 50:
            raise ConfigError(f"sample size must be an integer >= 50, got {self.n}")
        if self.c5_support not in ("integers", "endpoints"):
            raise ConfigError("c5_support must be 'integers' or 'endpoints'")


def draw_covariates(n: int, rng: np.random.Generator, c5_support: str = "integers"):
    c = np.empty((n, 6))
    c[:, :4] = rng.standard_normal((n, 4))
    support = np.arange(-2, 3) if c5_support == "integers" else np.array([-2, 2])
    c[:, 4] = rng.choice(support, size=n)
    c[:, 5] = rng.uniform(-3.0, 3.0, size=n)
    return c


def draw_exposures(gps_dgp: int, c: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Exposure given covariates; ``N(0, v)`` residuals have variance ``v``."""
    n = c.shape[0]
    lin = -0.8 + c @ _GAMMA
    if gps_dgp == 1:
        return 9 * lin + 17 + rng.normal(0.0, _SD5, n)
    if gps_dgp == 2:
        z = rng.standard_normal(n)
        t2 = z / np.sqrt(rng.chisquare(2, n) / 2.0)
        return 15 * lin + 22 + t2
    if gps_dgp == 3:
        return 9 * lin + 1.5 * c[:, 2] ** 2 + 15 + rng.normal(0.0, _SD5, n)
    if gps_dgp == 4:
        return 49 * np.exp(lin) / (1 + np.exp(lin)) - 6 + rng.normal(0.0, _SD5, n)
    if gps_dgp == 5:
        return 42 / (1 + np.exp(lin)) - 18 + rng.normal(0.0, _SD5, n)
    # the linear index is almost always negative; the log is taken of its magnitude
    return 7 * np.log(np.abs(lin)) + 13 + rng.normal(0.0, 2.0, n)


def outcome_mean(w, c) -> np.ndarray:
    """Conditional outcome mean ``mu(w, c)``, cubic in the exposure."""
    w = np.asarray(w, dtype=float)
    c = np.asarray(c, dtype=float)
    slope = 0.1 - 0.1 * c[..., 0] + 0.1 * c[..., 3] + 0.1 * c[..., 4] + 0.1 * c[..., 2] ** 2
    return -10.0 - c @ _BETA - w * slope + 0.13**2 * w**3


def true_erf(w):
    """Exposure-response ``E_C[mu(w, C)] = -10 - 0.2 w + 0.0169 w^3``."""
    w = np.asarray(w, dtype=float)
    out = -10.0 - 0.2 * w + 0.13**2 * w**3
    return float(out) if out.ndim == 0 else out


def scenario_rng(seed: int, scenario: int, n: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, scenario, n, replicate]))


def generate(scenario: Scenario, rng: Optional[np.random.Generator] = None) -> Dataset:
    """Draw a dataset (covariates, exposure, outcome with noise sd 10)."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, scenario.gps_dgp,
                                                            scenario.n]))
    c = draw_covariates(scenario.n, rng, scenario.c5_support)
    w = draw_exposures(scenario.gps_dgp, c, rng)
    y = outcome_mean(w, c) + rng.normal(0.0, 10.0, scenario.n)
    return Dataset(w, c, y, covariate_names=COVARIATE_NAMES)


@lru_cache(maxsize=None)
def evaluation_points(gps_dgp: int, n_points: int = 200, reference_n: int = 200_000,
                      trim: float = 0.05) -> np.ndarray:
    """Quantiles of the marginal exposure law over ``[trim, 1 - trim]``.

    Averaging a function over these points approximates its integral against
    the exposure density with ``trim`` of the mass removed in each tail.
    """
    rng = np.random.default_rng(np.random.SeedSequence([20_200_817, gps_dgp]))
    c = draw_covariates(reference_n, rng)
    w = draw_exposures(gps_dgp, c, rng)
    probs = np.linspace(trim, 1.0 - trim, n_points)
    pts = np.quantile(w, probs)
    pts.setflags(write=False)
    return pts


def abs_bias_mse(curves, truth) -> tuple[float, float]:
    """Integrated absolute bias and root-mean-squared error.

    ``curves`` is ``(S, P)``: S replicate curves at P evaluation points that
    carry equal integration weight; ``truth`` has length P. Non-finite
    values give ``(nan, nan)``.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    truth = np.asarray(truth, dtype=float)
    if curves.shape[0] < 1:
        raise ConfigError("need at least one replicate curve")
    if not np.all(np.isfinite(curves)):
        return math.nan, math.nan
    err = curves - truth[None, :]
    abs_bias = float(np.mean(np.abs(err.mean(axis=0))))
    mse = float(np.mean(np.sqrt(np.mean(err * err, axis=0))))
    return abs_bias, mse


@dataclass(frozen=True)
class BenchmarkConfig:
    """Settings shared by every cell of a benchmark run."""

    gps_learner: str = "normal-linear"
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    adjustment_model: OutcomeModelConfig = field(default_factory=lambda: OutcomeModelConfig(degree=3))
    dr_model: OutcomeModelConfig = field(default_factory=lambda: OutcomeModelConfig(degree=2))
    dr_smoother: SmootherConfig = field(default_factory=SmootherConfig)
    trim_cap: Optional[float] = 10.0
    dr_trim_cap: Optional[float] = None
    n_points: int = 200


def _fit_curve(method: str, data: Dataset, points: np.ndarray, config: BenchmarkConfig):
    if method == "matching":
        pipe = PipelineConfig(**{**config.pipeline.__dict__, "learner": config.gps_learner})
        return run_matching_pipeline(data, pipe).estimate.evaluate(points)
    design = data.without_outcomes()
    model = fit_gps(design, config.gps_learner)
    surface = gps_surface(model, design)
    if method == "adjustment":
        return adjustment_estimate(data, surface, points, config.adjustment_model).point
    if method == "iptw":
        return iptw_estimate(data, surface, points, config.trim_cap).point
    if method == "dr":
        return dr_estimate(data, surface, points, config.dr_model, config.dr_smoother,
                           config.dr_trim_cap).point
    raise ConfigError(f"unknown method {method!r}")


def run_replicate(gps_dgp: int, n: int, replicate: int, seed: int, methods: Sequence[str],
                  config: BenchmarkConfig = BenchmarkConfig()) -> dict:
    """Curves at the evaluation points for every method on one replicate.

    A method that fails on this replicate maps to ``None``.
    """
    data = generate(Scenario(gps_dgp, n, seed), scenario_rng(seed, gps_dgp, n, replicate))
    points = evaluation_points(gps_dgp, config.n_points)
    out = {}
    for method in methods:
        try:
            with np.errstate(all="ignore"):
                curve = _fit_curve(method, data, points, config)
            out[method] = np.asarray(curve, dtype=float)
        except (GpsMatchError, ValueError, ArithmeticError, np.linalg.LinAlgError):
            out[method] = None
    return out


@dataclass(frozen=True)
class SimRow:
    scenario: int
    n: int
    method: str
    abs_bias: float
    mse: float
    diverged: bool
    replicates: int
    failures: int


@dataclass(frozen=True, eq=False)
class SimReport:
    """Benchmark table; ``curves`` keeps the per-replicate curves by cell."""

    rows: list
    trim: float = 0.05
    curves: dict = field(default_factory=dict, repr=False)

    def row(self, scenario: int, n: int, method: str) -> SimRow:
        for r in self.rows:
            if (r.scenario, r.n, r.method) == (scenario, n, method):
                return r
        raise KeyError((scenario, n, method))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["scenario", "N", "method", "abs_bias", "mse", "diverged_flag",
                             "replicates", "failures"])
            for r in self.rows:
                writer.writerow([r.scenario, r.n, r.method,
                                 "" if r.diverged else repr(r.abs_bias),
                                 "" if r.diverged else repr(r.mse),
                                 int(r.diverged), r.replicates, r.failures])


def summarize_cell(curves: list, truth: np.ndarray) -> tuple[float, float, bool, int]:
    """Metrics for one cell; diverged when over half the replicates failed,
    any curve is non-finite, or a metric exceeds the divergence limit."""
    ok = [c for c in curves if c is not None]
    failures = len(curves) - len(ok)
    if not ok or failures > len(curves) / 2:
        return math.nan, math.nan, True, failures
    abs_bias, mse = abs_bias_mse(np.vstack(ok), truth)
    diverged = not (math.isfinite(abs_bias) and math.isfinite(mse)) or max(abs_bias, mse) > DIVERGENCE_LIMIT
    return abs_bias, mse, diverged, failures


def _replicate_task(args):
    return run_replicate(*args)


def run_benchmark(scenarios: Sequence[int] = (1,), sizes: Sequence[int] = (1000,),
                  methods: Sequence[str] = METHODS, reps: int = 100, seed: int = 0,
                  config: BenchmarkConfig = BenchmarkConfig(), workers: int = 1) -> SimReport:
    """Run every (scenario, N) cell for ``reps`` seeded replicates.

    Replicate seeds depend only on ``(seed, scenario, N, replicate)``, so the
    report does not depend on ``workers`` or on execution order.
    """
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    tasks = [(s, n, r, seed, tuple(methods), config)
             for s in scenarios for n in sizes for r in range(reps)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=1))
    else:
        results = [_replicate_task(t) for t in tasks]

    rows, curves = [], {}
    for s in scenarios:
        truth = true_erf(evaluation_points(s, config.n_points))
        for n in sizes:
            cell = [res for t, res in zip(tasks, results) if t[0] == s and t[1] == n]
            for m in methods:
                cs = [res[m] for res in cell]
                curves[(s, n, m)] = cs
                abs_bias, mse, diverged, failures = summarize_cell(cs, truth)
                rows.append(SimRow(s, n, m, abs_bias, mse, diverged, reps, failures))
    return SimReport(rows, curves=curves)
