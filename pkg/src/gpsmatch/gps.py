"""Generalized propensity scores: conditional exposure densities e(w, c).

Every learner models the exposure as a learned conditional mean plus a
homoscedastic Gaussian residual, so the GPS is a normal density centred on
``m(c)`` with a global standard deviation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import ConfigError, DegeneracyError, FitError, InputError, StandardizationError

LEARNERS = ("normal-linear", "polynomial-normal", "boosted-stumps-normal")
_ALIASES = {
    "normal": "normal-linear",
    "linear": "normal-linear",
    "poly": "polynomial-normal",
    "polynomial": "polynomial-normal",
    "boost": "boosted-stumps-normal",
    "boosted": "boosted-stumps-normal",
}
_SQRT_2PI = math.sqrt(2.0 * math.pi)
_TINY = np.finfo(float).tiny


def canonical_learner(kind: str) -> str:
    kind = _ALIASES.get(kind, kind)
    if kind not in LEARNERS:
        raise ConfigError(f"unknown learner {kind!r}; choose from {LEARNERS}")
    return kind


def polynomial_terms(n_features: int, degree: int) -> list[tuple[int, ...]]:
    """Monomials of total degree 1..degree as tuples of feature indices."""
    terms = []
    for d in range(1, degree + 1):
        terms.extend(combinations_with_replacement(range(n_features), d))
    return terms


def polynomial_design(x: np.ndarray, terms) -> np.ndarray:
    """Design matrix with an intercept column followed by one column per term."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    cols = [np.ones(x.shape[0])]
    for t in terms:
        cols.append(np.prod(x[:, list(t)], axis=1))
    return np.column_stack(cols)


def least_squares(design: np.ndarray, target: np.ndarray, names=None,
                  weights: Optional[np.ndarray] = None) -> np.ndarray:
    """(Weighted) least-squares coefficients; raises FitError on rank deficiency.

    The error message names the columns involved in the null direction of
    the design matrix.
    """
    x = np.asarray(design, dtype=float)
    y = np.asarray(target, dtype=float)
    if weights is not None:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        x = x * sw[:, None]
        y = y * sw
    scale = np.linalg.norm(x, axis=0)
    scale[scale == 0] = 1.0
    xs = x / scale
    _, s, vt = np.linalg.svd(xs, full_matrices=False)
    tol = s[0] * max(xs.shape) * np.finfo(float).eps * 10 if s.size else 0.0
    if s.size < x.shape[1] or s[-1] <= tol:
        null = vt[-1]
        involved = np.flatnonzero(np.abs(null) > 1e-6)
        labels = names if names is not None else [f"x{k}" for k in range(x.shape[1])]
        raise FitError(
            "singular design matrix; collinear columns: "
            + ", ".join(str(labels[k]) for k in involved)
        )
    coef, *_ = np.linalg.lstsq(xs, y, rcond=None)
    return coef / scale


# --- gradient-boosted stumps -------------------------------------------------

def _best_stump(sorted_x, order, residual, min_leaf):
    """Best squared-error split over all features.

    Returns (feature, threshold, left_value, right_value, gain) or None. Ties
    keep the first feature and the lowest threshold.
    """
    n = residual.shape[0]
    total = residual.sum()
    best = None
    best_gain = 0.0
    for k in range(sorted_x.shape[1]):
        xs = sorted_x[:, k]
        r = residual[order[:, k]]
        csum = np.cumsum(r)[:-1]
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        gain = csum**2 / n_left + (total - csum) ** 2 / (n - n_left) - total**2 / n
        gain = np.where(valid, gain, -np.inf)
        pos = int(np.argmax(gain))
        if gain[pos] > best_gain * (1 + 1e-12) + 1e-300:
            best_gain = float(gain[pos])
            thr = 0.5 * (xs[pos] + xs[pos + 1])
            left = csum[pos] / n_left[pos]
            right = (total - csum[pos]) / (n - n_left[pos])
            best = (k, float(thr), float(left), float(right), best_gain)
    return best


def fit_boosted_stumps(x, y, n_trees=100, learning_rate=0.1, min_leaf=5):
    """Least-squares gradient boosting with depth-1 trees.

    Returns ``(intercept, stumps)`` where each stump is
    ``(feature, threshold, left_value, right_value)`` already scaled by the
    learning rate.
    """
    if int(n_trees) != n_trees or n_trees < 0:
        raise ConfigError("n_trees must be a non-negative integer")
    if not 0 < learning_rate <= 1:
        raise ConfigError("learning_rate must lie in (0, 1]")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    intercept = float(y.mean())
    pred = np.full(y.shape, intercept)
    order = np.argsort(x, axis=0, kind="stable")
    sorted_x = np.take_along_axis(x, order, axis=0)
    stumps = []
    for _ in range(int(n_trees)):
        found = _best_stump(sorted_x, order, y - pred, min_leaf)
        if found is None:
            break
        k, thr, left, right, _gain = found
        left *= learning_rate
        right *= learning_rate
        pred += np.where(x[:, k] <= thr, left, right)
        stumps.append((k, thr, left, right))
    return intercept, stumps


def predict_stumps(intercept, stumps, x):
    x = np.asarray(x, dtype=float)
    pred = np.full(x.shape[0], float(intercept))
    for k, thr, left, right in stumps:
        pred += np.where(x[:, k] <= thr, left, right)
    return pred


# --- the fitted model ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GpsModel:
    """Fitted conditional density of the exposure given covariates."""

    learner_kind: str
    mean_params: dict
    residual_sd: float
    n_obs: int
    n_covariates: int
    loglik: float
    hyperparams: dict = field(default_factory=dict)

    def conditional_mean(self, covariates) -> np.ndarray:
        c = np.asarray(covariates, dtype=float)
        if c.ndim == 1:
            c = c[None, :]
        if c.shape[1] != self.n_covariates:
            raise InputError(f"expected {self.n_covariates} covariates, got {c.shape[1]}")
        p = self.mean_params
        if self.learner_kind == "normal-linear":
            return p["intercept"] + c @ np.asarray(p["coef"], dtype=float)
        if self.learner_kind == "polynomial-normal":
            terms = [tuple(t) for t in p["terms"]]
            return polynomial_design(c, terms) @ np.asarray(p["coef"], dtype=float)
        return predict_stumps(p["intercept"], p["stumps"], c)

    def evaluate(self, w, covariates) -> np.ndarray:
        """Vectorised density ``e(w, c)``; ``w`` broadcasts against the rows of ``c``."""
        w = np.asarray(w, dtype=float)
        c = np.asarray(covariates, dtype=float)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(c))):
            raise InputError("exposure and covariates must be finite")
        m = self.conditional_mean(c)
        return normal_density(w, m, self.residual_sd)

    def to_dict(self) -> dict:
        params = dict(self.mean_params)
        if "stumps" in params:
            params["stumps"] = [list(s) for s in params["stumps"]]
        if "terms" in params:
            params["terms"] = [list(t) for t in params["terms"]]
        if "coef" in params:
            params["coef"] = [float(v) for v in params["coef"]]
        return {
            "learner_kind": self.learner_kind,
            "mean_params": params,
            "residual_sd": self.residual_sd,
            "n_obs": self.n_obs,
            "n_covariates": self.n_covariates,
            "loglik": self.loglik,
            "hyperparams": dict(self.hyperparams),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpsModel":
        params = dict(d["mean_params"])
        if "stumps" in params:
            params["stumps"] = [(int(s[0]), float(s[1]), float(s[2]), float(s[3]))
                                for s in params["stumps"]]
        if "terms" in params:
            params["terms"] = [tuple(t) for t in params["terms"]]
        return cls(d["learner_kind"], params, float(d["residual_sd"]), int(d["n_obs"]),
                   int(d["n_covariates"]), float(d["loglik"]), dict(d.get("hyperparams", {})))

    def to_json(self) -> str:
        # json writes floats with repr, which round-trips exactly
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GpsModel":
        return cls.from_dict(json.loads(text))


def normal_density(w, mean, sd):
    z = (np.asarray(w, dtype=float) - mean) / sd
    # floor at the smallest normal double so the density never vanishes exactly
    return np.maximum(np.exp(-0.5 * z * z) / (_SQRT_2PI * sd), _TINY)


def fit_gps(dataset: Dataset, learner_kind: str = "normal-linear", **hyperparams) -> GpsModel:
    """Fit a GPS model of the exposure on the covariates.

    Parameters
    ----------
    learner_kind
        ``normal-linear`` (maximum likelihood under Gaussian residuals),
        ``polynomial-normal`` (hyperparameter ``degree``, default 2) or
        ``boosted-stumps-normal`` (``n_trees`` default 100, ``learning_rate``
        default 0.1, ``min_leaf`` default 5).

    The residual standard deviation always uses the ML divisor N.
    """
    kind = canonical_learner(learner_kind)
    w = dataset.exposures
    c = dataset.covariates
    names = ["intercept", *dataset.covariate_names]
    if kind == "normal-linear":
        coef = least_squares(np.column_stack([np.ones(dataset.n), c]), w, names)
        params = {"intercept": float(coef[0]), "coef": coef[1:]}
        fitted = coef[0] + c @ coef[1:]
    elif kind == "polynomial-normal":
        degree = int(hyperparams.get("degree", 2))
        if degree < 1:
            raise ConfigError("polynomial degree must be >= 1")
        terms = polynomial_terms(dataset.q, degree)
        design = polynomial_design(c, terms)
        labels = ["intercept"] + ["*".join(dataset.covariate_names[k] for k in t) for t in terms]
        coef = least_squares(design, w, labels)
        params = {"terms": terms, "coef": coef}
        fitted = design @ coef
        hyperparams = {"degree": degree}
    else:
        n_trees = hyperparams.get("n_trees", 100)
        lr = float(hyperparams.get("learning_rate", 0.1))
        min_leaf = int(hyperparams.get("min_leaf", 5))
        if n_trees < 0:
            raise ConfigError("n_trees must be >= 0")
        intercept, stumps = fit_boosted_stumps(c, w, n_trees, lr, min_leaf)
        params = {"intercept": intercept, "stumps": stumps}
        fitted = predict_stumps(intercept, stumps, c)
        hyperparams = {"n_trees": int(n_trees), "learning_rate": lr, "min_leaf": min_leaf}

    resid = w - fitted
    sigma = math.sqrt(float(np.mean(resid**2)))
    if sigma <= 1e-10 * max(1.0, float(np.std(w))):
        raise DegeneracyError("residual standard deviation is zero (perfect fit)")
    loglik = float(np.sum(np.log(normal_density(w, fitted, sigma))))
    return GpsModel(kind, params, sigma, dataset.n, dataset.q, loglik, dict(hyperparams))


def evaluate_gps(model: GpsModel, w: float, c) -> float:
    """Density of a single (exposure, covariate vector) pair."""
    if not math.isfinite(w):
        raise InputError(f"exposure must be finite, got {w}")
    return float(model.evaluate(w, np.asarray(c, dtype=float).reshape(1, -1))[0])


@dataclass(frozen=True, eq=False)
class GpsSurface:
    """Estimated GPS at every unit's observed exposure, with its range."""

    observed_gps: np.ndarray
    gps_min: float
    gps_max: float
    model: GpsModel
    degenerate: bool

    def standardize(self, values) -> np.ndarray:
        """Map GPS values onto [0, 1] with the observed range, clamping outliers."""
        if self.degenerate:
            raise StandardizationError("GPS surface is degenerate (max == min)")
        v = (np.asarray(values, dtype=float) - self.gps_min) / (self.gps_max - self.gps_min)
        return np.clip(v, 0.0, 1.0)


def gps_surface(model: GpsModel, dataset: Dataset) -> GpsSurface:
    if dataset.q != model.n_covariates:
        raise InputError(f"model expects {model.n_covariates} covariates, dataset has {dataset.q}")
    e = model.evaluate(dataset.exposures, dataset.covariates)
    e.setflags(write=False)
    lo, hi = float(e.min()), float(e.max())
    degenerate = not (hi - lo > 1e-12 * hi)
    return GpsSurface(e, lo, hi, model, degenerate)
