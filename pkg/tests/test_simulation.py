import math

import numpy as np
import pytest
from scipy.stats import kurtosis

from gpsmatch.errors import ConfigError
from gpsmatch.simulation import (BenchmarkConfig, Scenario, abs_bias_mse, draw_covariates,
                                 evaluation_points, generate, outcome_mean, run_benchmark,
                                 summarize_cell, true_erf)


def test_scenario_one_exposure_mean():
    ds = generate(Scenario(1, 100_000, seed=0))
    se = ds.exposures.std(ddof=1) / math.sqrt(ds.n)
    assert abs(ds.exposures.mean() - 9.8) < 3 * se


def test_same_seed_bit_identical():
    a, b = generate(Scenario(3, 500, seed=4)), generate(Scenario(3, 500, seed=4))
    assert np.array_equal(a.exposures, b.exposures)
    assert np.array_equal(a.covariates, b.covariates)
    assert np.array_equal(a.outcomes, b.outcomes)


def test_heavy_tails():
    hits = sum(kurtosis(generate(Scenario(2, 100_000, seed=s)).exposures) > 3 for s in range(20))
    assert hits >= 19


def test_covariate_laws():
    c = draw_covariates(50_000, np.random.default_rng(0))
    assert set(np.unique(c[:, 4])) == {-2, -1, 0, 1, 2}
    assert c[:, 5].min() >= -3 and c[:, 5].max() <= 3
    np.testing.assert_allclose(c[:, :4].std(axis=0), 1.0, atol=0.02)
    two = draw_covariates(1000, np.random.default_rng(0), "endpoints")
    assert set(np.unique(two[:, 4])) == {-2, 2}


@pytest.mark.parametrize("scenario", range(1, 7))
def test_every_scenario_generates(scenario):
    ds = generate(Scenario(scenario, 200, seed=1))
    assert ds.n == 200 and ds.q == 6 and np.all(np.isfinite(ds.exposures))


def test_true_erf_closed_form():
    assert true_erf(0.0) == -10.0
    assert true_erf(10.0) == pytest.approx(4.9, abs=1e-12)


@pytest.mark.parametrize("w", [5.0, 10.0, 15.0, 20.0])
def test_true_erf_monte_carlo(w):
    c = draw_covariates(1_000_000, np.random.default_rng(int(w)))
    vals = outcome_mean(np.full(c.shape[0], w), c)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - true_erf(w)) < 3 * se


def test_metric_identities():
    truth = np.linspace(-1, 1, 50)
    assert abs_bias_mse(np.tile(truth, (3, 1)), truth) == (0.0, 0.0)
    a, m = abs_bias_mse(np.tile(truth + 1, (3, 1)), truth)
    assert a == pytest.approx(1.0) and m == pytest.approx(1.0)
    curves = np.vstack([truth + 1, truth - 1])
    a, m = abs_bias_mse(curves, truth)
    assert a == pytest.approx(0.0) and m == pytest.approx(1.0)


def test_non_finite_flags_divergence():
    truth = np.zeros(4)
    assert summarize_cell([np.array([0.0, np.nan, 0.0, 0.0])], truth)[2]
    assert summarize_cell([None, None, np.zeros(4)], truth)[2]
    assert not summarize_cell([None, np.zeros(4), np.zeros(4)], truth)[2]


def test_evaluation_points_cover_central_mass():
    pts = evaluation_points(1)
    assert pts.shape == (200,) and np.all(np.diff(pts) > 0)
    ref = generate(Scenario(1, 100_000, seed=9)).exposures
    frac = np.mean((ref >= pts[0]) & (ref <= pts[-1]))
    assert abs(frac - 0.9) < 0.01


def test_smoke_benchmark(tmp_path):
    report = run_benchmark((1,), (200,), ("matching",), reps=2, seed=0)
    assert len(report.rows) == 1
    row = report.rows[0]
    assert np.isfinite(row.abs_bias) and np.isfinite(row.mse) and not row.diverged
    report.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "scenario,N,method,abs_bias,mse,diverged_flag,replicates,failures"


def test_workers_do_not_change_report():
    methods = ("matching", "iptw")
    a = run_benchmark((1,), (200,), methods, reps=3, seed=5)
    b = run_benchmark((1,), (200,), methods, reps=3, seed=5, workers=2)
    assert a.rows == b.rows


def test_unknown_method():
    with pytest.raises(ConfigError):
        run_benchmark(methods=("ols",), reps=1)


def test_config_validation():
    with pytest.raises(ConfigError):
        Scenario(7)
    with pytest.raises(ConfigError):
        Scenario(1, n=10)
    assert BenchmarkConfig().trim_cap == 10.0
