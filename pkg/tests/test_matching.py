import time

import numpy as np
import pytest

from gpsmatch.data import Dataset, grid_from_range
from gpsmatch.errors import ConfigError, StandardizationError
from gpsmatch.gps import GpsModel, fit_gps, gps_surface
from gpsmatch.matching import MatchConfig, build_matched_set, match_at_level, standardize

from conftest import linear_dataset


def brute_force(level, ds, surface, lam, metric, delta, m=1):
    """Exhaustive scan written without the library's vectorized distance."""
    w = ds.exposures
    w_lo, w_hi = w.min(), w.max()
    e_lo, e_hi = surface.observed_gps.min(), surface.observed_gps.max()
    out = []
    for t in range(ds.n):
        e_t = surface.model.evaluate(level, ds.covariates[t:t + 1])[0]
        e_t = min(1.0, max(0.0, (e_t - e_lo) / (e_hi - e_lo)))
        w_t = (level - w_lo) / (w_hi - w_lo)
        scored = []
        for j in range(ds.n):
            if abs(w[j] - level) > delta:
                continue
            a = lam * abs((surface.observed_gps[j] - e_lo) / (e_hi - e_lo) - e_t)
            b = (1 - lam) * abs((w[j] - w_lo) / (w_hi - w_lo) - w_t)
            d = a + b if metric == "l1" else (a * a + b * b) ** 0.5
            scored.append((d, j))
        scored.sort()
        out.append([j for _, j in scored[:m]])
    return np.array(out)


def setup(n, q, seed):
    ds = linear_dataset(n, q, seed, outcomes=False)
    return ds, gps_surface(fit_gps(ds), ds)


def test_standardize_examples():
    np.testing.assert_array_equal(standardize([2, 4, 6]), [0, 0.5, 1])
    with pytest.raises(StandardizationError):
        standardize([5, 5, 5])


def test_standardize_oracle():
    v = np.random.default_rng(1).normal(size=10)
    np.testing.assert_allclose(standardize(v), (v - v.min()) / (v.max() - v.min()), atol=1e-15)


def test_lambda_zero_is_nearest_exposure():
    ds, surface = setup(80, 2, 3)
    level, delta = 5.0, 1.0
    picks = match_at_level(level, ds, surface, MatchConfig(delta, lam=0.0))
    cand = np.flatnonzero(np.abs(ds.exposures - level) <= delta)
    nearest = cand[np.argmin(np.abs(ds.exposures[cand] - level))]
    assert np.all(picks[:, 0] == nearest)


def test_exact_match_selected():
    # unit 2 sits exactly at the level, so its coordinates equal every target's exposure
    # coordinate; with a constant-mean model every target's GPS equals its GPS too
    model = GpsModel("normal-linear", {"intercept": 0.0, "coef": np.zeros(1)}, 1.0, 5, 1, 0.0)
    ds = Dataset([0.0, 1.0, 2.0, 3.0, 4.0], [[0.0], [1.0], [2.0], [3.0], [4.0]])
    surface = gps_surface(model, ds)
    for lam in (0.0, 0.5, 1.0):
        picks = match_at_level(2.0, ds, surface, MatchConfig(1.5, lam))
        assert np.all(picks[:, 0] == 2)


def test_six_unit_l2_oracle():
    ds, surface = setup(6, 1, 7)
    level = float(np.median(ds.exposures))
    delta = float(np.ptp(ds.exposures)) / 2
    picks = match_at_level(level, ds, surface, MatchConfig(delta, 0.7, "l2"))
    np.testing.assert_array_equal(picks, brute_force(level, ds, surface, 0.7, "l2", delta))


def test_oracle_equivalence_many_datasets():
    start = time.time()
    rng = np.random.default_rng(2024)
    for k in range(100):
        n = int(rng.integers(10, 201))
        ds, surface = setup(n, int(rng.integers(1, 4)), 1000 + k)
        lo, hi = ds.exposure_range
        delta = float(rng.uniform(0.05, 0.3)) * (hi - lo)
        grid = grid_from_range(lo, hi, delta)
        level = float(grid.levels[rng.integers(grid.count)])
        for metric in ("l1", "l2"):
            for lam in (0.0, 0.5, 1.0):
                picks = match_at_level(level, ds, surface, MatchConfig(delta, lam, metric))
                if picks is None:
                    assert not np.any(np.abs(ds.exposures - level) <= delta)
                    continue
                np.testing.assert_array_equal(
                    picks, brute_force(level, ds, surface, lam, metric, delta))
    assert time.time() - start < 60


def test_toy_multiplicity_conservation():
    model = GpsModel("normal-linear", {"intercept": 2.0, "coef": np.array([0.5])}, 1.0, 5, 1, 0.0)
    ds = Dataset([0.0, 1.0, 2.5, 3.0, 4.0], [[0.0], [1.0], [-1.0], [2.0], [0.5]])
    surface = gps_surface(model, ds)
    grid = grid_from_range(0.0, 4.0, 1.0)
    matched = build_matched_set(ds, surface, grid, MatchConfig(1.0, 0.5))
    assert grid.count == 2 and matched.matched.all()
    np.testing.assert_array_equal(matched.multiplicity.sum(axis=1), [5, 5])


def test_isolated_level_unmatched():
    c = np.array([[0.0], [1.0], [0.3], [2.0], [1.5], [0.7]])
    ds = Dataset([0.0, 0.2, 0.4, 9.6, 9.8, 10.0], c)
    surface = gps_surface(fit_gps(ds), ds)
    grid = grid_from_range(0.0, 10.0, 1.0)
    matched = build_matched_set(ds, surface, grid, MatchConfig(1.0, 1.0))
    assert matched.unmatched_levels == [3.0, 5.0, 7.0]
    assert list(matched.matched_levels) == [1.0, 9.0]


@pytest.mark.parametrize("m", [1, 3])
def test_compositional_oracle(m):
    ds, surface = setup(50, 2, 9)
    lo, hi = ds.exposure_range
    grid = grid_from_range(lo, hi, (hi - lo) / 10)
    config = MatchConfig(grid.caliper, 0.6, "l2", m)
    matched = build_matched_set(ds, surface, grid, config)
    for i, level in enumerate(grid.levels):
        picks = match_at_level(float(level), ds, surface, config)
        if picks is None:
            assert not matched.matched[i]
            continue
        np.testing.assert_array_equal(matched.indices[i], picks)
        np.testing.assert_array_equal(matched.multiplicity[i],
                                      np.bincount(picks.ravel(), minlength=ds.n))
        assert matched.multiplicity[i].sum() == ds.n * m
        used = matched.multiplicity[i] > 0
        assert np.all(np.abs(ds.exposures[used] - level) <= grid.caliper)


def test_parallel_schedule_identical():
    ds, surface = setup(150, 3, 4)
    lo, hi = ds.exposure_range
    grid = grid_from_range(lo, hi, (hi - lo) / 30)
    config = MatchConfig(grid.caliper, 0.5)
    a = build_matched_set(ds, surface, grid, config)
    b = build_matched_set(ds, surface, grid, config, n_jobs=4)
    np.testing.assert_array_equal(a.indices, b.indices)


def test_multiple_matches_imputed_mean():
    ds = linear_dataset(40, 2, 5)
    surface = gps_surface(fit_gps(ds), ds)
    lo, hi = ds.exposure_range
    grid = grid_from_range(lo, hi, (hi - lo) / 6)
    matched = build_matched_set(ds, surface, grid, MatchConfig(grid.caliper, 1.0, "l1", 2))
    matched = matched.with_outcomes(ds)
    for i in np.flatnonzero(matched.matched):
        np.testing.assert_allclose(matched.imputed_outcomes[i],
                                   ds.outcomes[matched.indices[i]].mean(axis=1))


def test_gps_caliper_filters():
    ds, surface = setup(100, 2, 8)
    level = float(np.median(ds.exposures))
    picks = match_at_level(level, ds, surface, MatchConfig(1.0, 1.0, gps_caliper=1e-9))
    assert np.any(picks[:, 0] == -1)


def test_matched_csv(tmp_path):
    ds = linear_dataset(20, 1, 1)
    surface = gps_surface(fit_gps(ds), ds)
    lo, hi = ds.exposure_range
    grid = grid_from_range(lo, hi, (hi - lo) / 4)
    matched = build_matched_set(ds, surface, grid, MatchConfig(grid.caliper)).with_outcomes(ds)
    matched.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "level,target_id,matched_id,matched_exposure,imputed_outcome,multiplicity"
    assert len(lines) == 1 + ds.n * int(matched.matched.sum())


@pytest.mark.parametrize("kwargs", [dict(delta=0.0), dict(delta=1.0, lam=1.5),
                                    dict(delta=1.0, metric="chebyshev"),
                                    dict(delta=1.0, matches_per_unit=0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        MatchConfig(**kwargs)
