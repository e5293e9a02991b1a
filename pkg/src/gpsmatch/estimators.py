"""Analysis stage: exposure-response estimators.

The matching estimator averages imputed outcomes per grid level and is then
smoothed across levels. Three GPS-based comparators (covariate adjustment,
stabilized IPTW and a doubly-robust pseudo-outcome estimator) and a Poisson
rate regression on the matched set complete the module.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import Dataset, ExposureGrid
from .errors import ConfigError, ConvergenceError, DataError, FitError, OutcomeTypeError
from .gps import (GpsSurface, fit_boosted_stumps, least_squares, polynomial_design,
                  polynomial_terms, predict_stumps)
from .matching import MatchedSet
from .smoothing import SMOOTHERS, nadaraya_watson, select_bandwidth

METHODS = ("matching", "adjustment", "iptw", "dr")


@dataclass(frozen=True, eq=False)
class ErfEstimate:
    """Exposure-response curve on a set of exposure levels.

    ``variance`` holds the estimated variance of the point estimate at each
    level when available. ``evaluate`` re-smooths the point estimates at
    arbitrary exposures with the stored kernel and bandwidth.
    """

    levels: np.ndarray
    point: np.ndarray
    method: str
    smoothed: Optional[np.ndarray] = None
    kernel: Optional[str] = None
    bandwidth: Optional[float] = None
    variance: Optional[np.ndarray] = None
    ci_lo: Optional[np.ndarray] = None
    ci_hi: Optional[np.ndarray] = None
    caliper: Optional[float] = None
    exposure_range: Optional[tuple] = None

    def evaluate(self, w) -> np.ndarray:
        if self.bandwidth is None:
            raise ConfigError("estimate has not been smoothed")
        return nadaraya_watson(self.levels, self.point, w, self.bandwidth, self.kernel)

    def to_rows(self):
        n = len(self.levels)

        def col(a):
            return [None] * n if a is None else [float(v) for v in a]

        return list(zip([float(v) for v in self.levels], col(self.point), col(self.smoothed),
                        col(self.variance), col(self.ci_lo), col(self.ci_hi), [self.method] * n))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["w", "point", "smoothed", "variance", "ci_lo", "ci_hi", "method"])
            for row in self.to_rows():
                writer.writerow(["" if v is None or (isinstance(v, float) and math.isnan(v))
                                 else (repr(v) if isinstance(v, float) else v) for v in row])


def _levels(levels: Union[ExposureGrid, Sequence[float], np.ndarray]) -> np.ndarray:
    if isinstance(levels, ExposureGrid):
        return np.asarray(levels.levels, dtype=float)
    return np.atleast_1d(np.asarray(levels, dtype=float))


# --- matching estimator ------------------------------------------------------------

def matching_point_estimates(matched: MatchedSet, route: str = "multiplicity") -> np.ndarray:
    """Per-level matching estimates for the matched levels.

    ``route="multiplicity"`` computes ``sum_j K_i(j) Y_j / (N M)``;
    ``route="imputed"`` averages the imputed outcomes. Both agree whenever
    every target at a level is matched.
    """
    y = matched.dataset.outcomes
    if y is None:
        raise DataError("matched set carries no outcomes")
    rows = np.flatnonzero(matched.matched)
    if route == "imputed":
        return np.array([np.nanmean(matched.imputed_outcomes[i]) for i in rows])
    if route != "multiplicity":
        raise ConfigError(f"unknown route {route!r}")
    k = matched.multiplicity[rows].astype(float)
    return (k @ y) / k.sum(axis=1)


def matching_estimate(matched: MatchedSet) -> ErfEstimate:
    levels = matched.matched_levels
    return ErfEstimate(
        levels=np.array(levels),
        point=matching_point_estimates(matched, "multiplicity"),
        method="matching",
        caliper=matched.grid.caliper,
        exposure_range=matched.dataset.exposure_range,
    )


def default_bandwidth_range(caliper: float, exposure_range) -> tuple[float, float]:
    lo, hi = exposure_range
    return 2.0 * caliper, max(2.0 * caliper, (hi - lo) / 4.0)


def smooth_erf(estimate: ErfEstimate, kernel: str = "epanechnikov",
               bandwidth: Optional[float] = None, n_candidates: int = 20) -> ErfEstimate:
    """Nadaraya-Watson smoothing of the per-level estimates across levels.

    Without an explicit bandwidth, leave-one-out cross-validation picks one of
    ``n_candidates`` log-spaced values in ``[2 * caliper, span / 4]``.
    Levels where every kernel weight vanishes come out as NaN.
    """
    x, y = estimate.levels, estimate.point
    if len(x) < 2:
        raise ConfigError("smoothing needs at least two estimated levels")
    if bandwidth is None:
        if estimate.caliper is None or estimate.exposure_range is None:
            raise ConfigError("bandwidth required when caliper/range are unknown")
        lower, upper = default_bandwidth_range(estimate.caliper, estimate.exposure_range)
        bandwidth, _ = select_bandwidth(x, y, lower, upper, n_candidates, kernel)
    if not bandwidth > 0:
        raise ConfigError("bandwidth must be positive")
    smoothed = nadaraya_watson(x, y, x, bandwidth, kernel)
    return replace(estimate, smoothed=smoothed, kernel=kernel, bandwidth=float(bandwidth))


def plug_in_variance(matched: MatchedSet) -> np.ndarray:
    """Plug-in asymptotic variance ``Sigma_2`` per matched level.

    ``(1/N) sum_j delta (K_i(j)/M)^2 s_i^2`` over units inside the caliper,
    where ``s_i^2`` is the sample variance of the outcomes in that caliper
    window. NaN where the window holds fewer than two units. The variance of
    the point estimate itself is ``Sigma_2 / (N delta)``.
    """
    ds = matched.dataset
    if ds.outcomes is None:
        raise DataError("matched set carries no outcomes")
    delta = matched.grid.caliper
    m = matched.config.matches_per_unit
    out = []
    for i in np.flatnonzero(matched.matched):
        inside = np.abs(ds.exposures - matched.grid.levels[i]) <= delta
        if inside.sum() < 2:
            out.append(np.nan)
            continue
        s2 = float(np.var(ds.outcomes[inside], ddof=1))
        k = matched.multiplicity[i][inside] / m
        out.append(float(np.sum(delta * k * k * s2)) / ds.n)
    return np.array(out)


def with_plug_in_variance(estimate: ErfEstimate, matched: MatchedSet) -> ErfEstimate:
    sigma2 = plug_in_variance(matched)
    return replace(estimate, variance=sigma2 / (matched.dataset.n * matched.grid.caliper))


# --- outcome models ----------------------------------------------------------------

@dataclass(frozen=True)
class OutcomeModelConfig:
    """Learner for an outcome regression.

    ``learner`` is ``polynomial`` (full polynomial of total degree ``degree``
    with interactions) or ``boosted`` (gradient-boosted stumps).
    """

    learner: str = "polynomial"
    degree: int = 2
    n_trees: int = 200
    learning_rate: float = 0.1
    min_leaf: int = 5


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    config: OutcomeModelConfig
    params: dict = field(default_factory=dict)

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.config.learner == "polynomial":
            return polynomial_design(x, self.params["terms"]) @ self.params["coef"]
        return predict_stumps(self.params["intercept"], self.params["stumps"], x)

    def marginal_mean(self, w, covariates) -> np.ndarray:
        """``(1/N) sum_k mu(w, c_k)`` for each ``w``, where feature 0 is the exposure.

        Both learners separate into exposure and covariate parts, so the
        average over covariates is computed once rather than for every pair.
        """
        w = np.atleast_1d(np.asarray(w, dtype=float))
        c = np.asarray(covariates, dtype=float)
        if self.config.learner == "polynomial":
            total = np.full(w.shape, float(self.params["coef"][0]))
            for coef, t in zip(self.params["coef"][1:], self.params["terms"]):
                power = sum(1 for f in t if f == 0)
                rest = [f - 1 for f in t if f != 0]
                cpart = float(np.mean(np.prod(c[:, rest], axis=1))) if rest else 1.0
                total += coef * cpart * w**power
            return total
        total = np.full(w.shape, float(self.params["intercept"]))
        for k, thr, left, right in self.params["stumps"]:
            if k == 0:
                total += np.where(w <= thr, left, right)
            else:
                total += float(np.mean(np.where(c[:, k - 1] <= thr, left, right)))
        return total


def fit_outcome_model(x, y, config: OutcomeModelConfig = OutcomeModelConfig(),
                      names=None) -> OutcomeModel:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if config.learner == "polynomial":
        if config.degree < 1:
            raise ConfigError("outcome polynomial degree must be >= 1")
        terms = polynomial_terms(x.shape[1], config.degree)
        design = polynomial_design(x, terms)
        coef = least_squares(design, y)
        return OutcomeModel(config, {"terms": terms, "coef": coef})
    if config.learner == "boosted":
        intercept, stumps = fit_boosted_stumps(x, y, config.n_trees, config.learning_rate,
                                               config.min_leaf)
        return OutcomeModel(config, {"intercept": intercept, "stumps": stumps})
    raise ConfigError(f"unknown outcome learner {config.learner!r}")


# --- comparators -------------------------------------------------------------------

def _require_outcomes(dataset: Dataset):
    if dataset.outcomes is None:
        raise DataError("estimator requires outcomes")
    return dataset.outcomes


def adjustment_estimate(dataset: Dataset, surface: GpsSurface, levels,
                        outcome_config: OutcomeModelConfig = OutcomeModelConfig(degree=3)
                        ) -> ErfEstimate:
    """GPS covariate adjustment.

    Regress Y on (W, e(W, C)); at each level average the fitted regression at
    ``(w, e(w, c_j))`` over all units.
    """
    y = _require_outcomes(dataset)
    grid = _levels(levels)
    model = fit_outcome_model(np.column_stack([dataset.exposures, surface.observed_gps]), y,
                              outcome_config)
    point = np.empty(grid.shape[0])
    for i, w in enumerate(grid):
        e = surface.model.evaluate(w, dataset.covariates)
        point[i] = model.predict(np.column_stack([np.full(dataset.n, w), e])).mean()
    return ErfEstimate(grid, point, "adjustment", smoothed=point.copy())


def marginal_exposure_density(dataset: Dataset, surface: GpsSurface, w=None) -> np.ndarray:
    """``(1/N) sum_k e(w, c_k)``, by default at every observed exposure."""
    w = dataset.exposures if w is None else np.atleast_1d(np.asarray(w, dtype=float))
    means = surface.model.conditional_mean(dataset.covariates)
    sd = surface.model.residual_sd
    out = np.empty(w.shape[0])
    step = max(1, 2_000_000 // dataset.n)
    for s in range(0, w.shape[0], step):
        z = (w[s:s + step, None] - means[None, :]) / sd
        out[s:s + step] = np.exp(-0.5 * z * z).mean(axis=1) / (math.sqrt(2 * math.pi) * sd)
    return out


def trim_weights(weights, cap: Optional[float]) -> np.ndarray:
    """Cap weights from above (``None`` leaves them untouched)."""
    weights = np.asarray(weights, dtype=float)
    if cap is None:
        return weights.copy()
    if not cap > 0:
        raise ConfigError("trim cap must be positive")
    return np.minimum(weights, cap)


def stabilized_weights(dataset: Dataset, surface: GpsSurface,
                       trim_cap: Optional[float] = 10.0) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(raw, used)`` stabilized inverse-GPS weights.

    The numerator is the marginal exposure density under the empirical
    covariate distribution; ``used`` is ``raw`` capped at ``trim_cap``.
    """
    raw = marginal_exposure_density(dataset, surface) / surface.observed_gps
    return raw, trim_weights(raw, trim_cap)


def iptw_estimate(dataset: Dataset, surface: GpsSurface, levels, trim_cap: Optional[float] = 10.0,
                  outcome_stage: str = "cubic", kernel: str = "epanechnikov",
                  bandwidth: Optional[float] = None) -> ErfEstimate:
    """Stabilized, trimmed IPTW with a weighted outcome regression on exposure.

    ``outcome_stage="cubic"`` fits ``Y ~ w + w^2 + w^3`` by weighted least
    squares; ``"nadaraya-watson"`` uses a weighted kernel smoother instead.
    """
    y = _require_outcomes(dataset)
    grid = _levels(levels)
    _, weights = stabilized_weights(dataset, surface, trim_cap)
    w = dataset.exposures
    if outcome_stage == "cubic":
        centre, scale = float(np.mean(w)), float(np.std(w))
        u = (w - centre) / scale
        design = np.column_stack([np.ones_like(u), u, u**2, u**3])
        try:
            coef = least_squares(design, y, ["1", "w", "w^2", "w^3"], weights=weights)
        except FitError as exc:
            raise FitError(f"degenerate weighted design: {exc}") from None
        ug = (grid - centre) / scale
        point = np.column_stack([np.ones_like(ug), ug, ug**2, ug**3]) @ coef
    elif outcome_stage == "nadaraya-watson":
        if bandwidth is None:
            lo, hi = dataset.exposure_range
            bandwidth, _ = select_bandwidth(w, y, (hi - lo) / 100, (hi - lo) / 4, 20, kernel,
                                            weights=weights)
        point = nadaraya_watson(w, y, grid, bandwidth, kernel, weights=weights)
    else:
        raise ConfigError(f"unknown IPTW outcome stage {outcome_stage!r}")
    return ErfEstimate(grid, point, "iptw", smoothed=point.copy(), kernel=kernel if
                       outcome_stage != "cubic" else None, bandwidth=bandwidth)


@dataclass(frozen=True)
class SmootherConfig:
    """Final-stage smoother for the doubly-robust estimator."""

    kind: str = "local-linear"
    kernel: str = "epanechnikov"
    bandwidth: Optional[float] = None
    n_candidates: int = 20


def dr_pseudo_outcomes(dataset: Dataset, surface: GpsSurface, outcome_model: OutcomeModel,
                       trim_cap: Optional[float] = None) -> np.ndarray:
    """Doubly-robust pseudo-outcomes with empirical-average covariate integrals.

    ``trim_cap`` optionally caps the stabilized weight multiplying the residual.
    """
    y = _require_outcomes(dataset)
    w, c = dataset.exposures, dataset.covariates
    mu = outcome_model.predict(np.column_stack([w, c]))
    _, weights = stabilized_weights(dataset, surface, trim_cap)
    mu_bar = outcome_model.marginal_mean(w, c)
    return (y - mu) * weights + mu_bar


def dr_estimate(dataset: Dataset, surface: GpsSurface, levels,
                outcome_config: OutcomeModelConfig = OutcomeModelConfig(degree=2),
                smoother: SmootherConfig = SmootherConfig(),
                trim_cap: Optional[float] = None) -> ErfEstimate:
    """Doubly-robust estimator: kernel regression of pseudo-outcomes on exposure."""
    _require_outcomes(dataset)
    grid = _levels(levels)
    model = fit_outcome_model(np.column_stack([dataset.exposures, dataset.covariates]),
                              dataset.outcomes, outcome_config)
    zeta = dr_pseudo_outcomes(dataset, surface, model, trim_cap)
    if smoother.kind not in SMOOTHERS:
        raise ConfigError(f"unknown smoother {smoother.kind!r}")
    smooth = SMOOTHERS[smoother.kind]
    h = smoother.bandwidth
    if h is not None:
        point = smooth(dataset.exposures, zeta, grid, h, smoother.kernel)
    else:
        lo, hi = dataset.exposure_range
        cands = np.geomspace((hi - lo) / 100, (hi - lo) / 4, smoother.n_candidates)
        _, scores = select_bandwidth(dataset.exposures, zeta, cands[0], cands[-1],
                                     smoother.n_candidates, smoother.kernel,
                                     smoother=smoother.kind)
        # best cross-validated bandwidth that still defines the curve at every level
        for k in np.argsort(scores, kind="stable"):
            h = float(cands[k])
            point = smooth(dataset.exposures, zeta, grid, h, smoother.kernel)
            if np.all(np.isfinite(point)):
                break
    return ErfEstimate(grid, point, "dr", smoothed=point.copy(), kernel=smoother.kernel,
                       bandwidth=float(h))


# --- Poisson rate regression on the matched set ------------------------------------------

@dataclass(frozen=True)
class PoissonFit:
    intercept: float
    slope: float
    iterations: int

    def rate_ratio(self, increment: float = 10.0) -> float:
        return math.exp(increment * self.slope)


def poisson_regression(x, counts, offsets=None, weights=None, max_iter: int = 100,
                       tol: float = 1e-12) -> PoissonFit:
    """Newton-Raphson fit of ``log E[count] = a + b x + log(offset)``.

    The exposure is centred internally for conditioning.
    """
    x = np.asarray(x, dtype=float)
    yv = np.asarray(counts, dtype=float)
    off = np.ones_like(x) if offsets is None else np.asarray(offsets, dtype=float)
    wt = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if np.any(yv < 0) or np.any(yv != np.round(yv)):
        raise OutcomeTypeError("Poisson outcomes must be non-negative integers")
    if np.any(off <= 0):
        raise DataError("offsets must be positive")
    log_off = np.log(off)
    centre = float(np.average(x, weights=wt))
    xc = x - centre
    design = np.column_stack([np.ones_like(xc), xc])
    beta = np.array([math.log(max(np.sum(wt * yv), 1e-300) / np.sum(wt * off)), 0.0])
    for it in range(1, max_iter + 1):
        mu = np.exp(design @ beta + log_off)
        grad = design.T @ (wt * (yv - mu))
        hess = design.T @ (design * (wt * mu)[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular Hessian in Poisson fit") from None
        beta = beta + step
        if np.max(np.abs(step)) <= tol * (1.0 + np.max(np.abs(beta))):
            return PoissonFit(float(beta[0] - beta[1] * centre), float(beta[1]), it)
    raise ConvergenceError(f"Poisson fit did not converge in {max_iter} iterations")


def poisson_rate_fit(matched: MatchedSet, offsets=None) -> PoissonFit:
    """Univariate Poisson rate regression on the matched set.

    Each matched unit contributes its count and offset at the level's exposure,
    weighted by its multiplicity at that level.
    """
    ds = matched.dataset
    y = _require_outcomes(ds)
    off = ds.offsets if offsets is None else np.asarray(offsets, dtype=float)
    if off is None:
        off = np.ones(ds.n)
    xs, ys, os_, ws = [], [], [], []
    for i in np.flatnonzero(matched.matched):
        used = np.flatnonzero(matched.multiplicity[i])
        xs.append(np.full(used.size, matched.grid.levels[i]))
        ys.append(y[used])
        os_.append(off[used])
        ws.append(matched.multiplicity[i][used])
    return poisson_regression(np.concatenate(xs), np.concatenate(ys), np.concatenate(os_),
                              np.concatenate(ws).astype(float))
