"""Desk-scale acceptance checks.

Each test prints exactly one ``ACCEPTANCE <k> PASS|FAIL`` line (repeated in
the session summary) and then asserts the criterion. Informational numbers
that do not enter the verdict are printed on separate ``info`` lines.
"""
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy.stats import binomtest

from gpsmatch.balance import balance_report
from gpsmatch.data import Dataset, grid_from_range
from gpsmatch.estimators import (OutcomeModelConfig, SmootherConfig, dr_estimate,
                                 matching_point_estimates, smooth_erf, matching_estimate,
                                 stabilized_weights)
from gpsmatch.gps import GpsModel, fit_gps, gps_surface
from gpsmatch.inference import BootstrapConfig, bootstrap_band
from gpsmatch.matching import MatchConfig, build_matched_set, match_at_level
from gpsmatch.pipeline import PipelineConfig, exposure_window, run_design
from gpsmatch.simulation import (BenchmarkConfig, Scenario, evaluation_points, generate,
                                 run_benchmark, scenario_rng, true_erf)
from gpsmatch.tuning import tune

from conftest import ACCEPTANCE_LINES, linear_dataset
from test_matching import brute_force

SEED = 20240601
WORKERS = os.cpu_count() or 1


def report(k, passed, detail):
    line = f"ACCEPTANCE {k} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def info(k, detail):
    print(f"  info {k}: {detail}")


# --- 1: scenario 1 reproduction ---------------------------------------------------------

def test_criterion_1_scenario_one_reproduction():
    start = time.time()
    rep = run_benchmark((1,), (1000,), ("matching", "iptw"), reps=100, seed=SEED,
                        workers=WORKERS)
    elapsed = time.time() - start
    m, w = rep.row(1, 1000, "matching"), rep.row(1, 1000, "iptw")
    untrimmed = run_benchmark((1,), (1000,), ("iptw",), reps=100, seed=SEED,
                              config=BenchmarkConfig(trim_cap=None), workers=WORKERS)
    u = untrimmed.row(1, 1000, "iptw")
    info(1, f"untrimmed IPTW abs_bias={u.abs_bias:.3f} mse={u.mse:.3f}")
    ok = (not m.diverged and 0.2 <= m.abs_bias <= 1.0
          and (w.diverged or m.abs_bias < w.abs_bias) and elapsed < 600)
    report(1, ok, f"matching abs_bias={m.abs_bias:.3f} (mse {m.mse:.3f}) in [0.2, 1.0]; "
                  f"IPTW(trim 10) abs_bias={w.abs_bias:.3f} (mse {w.mse:.3f}); {elapsed:.0f}s")
    assert ok


# --- 2: heavy-tailed scenario ordering --------------------------------------------------

def test_criterion_2_heavy_tail_ordering():
    rep = run_benchmark((2,), (1000,), ("matching", "iptw", "dr"), reps=100, seed=SEED,
                        workers=WORKERS)
    m = rep.row(2, 1000, "matching")
    finite = not m.diverged and math.isfinite(m.abs_bias) and math.isfinite(m.mse)
    verdicts, parts = [], []
    for method in ("iptw", "dr"):
        r = rep.row(2, 1000, method)
        good = r.diverged or r.abs_bias >= 2 * m.abs_bias
        verdicts.append(good)
        parts.append(f"{method}={'diverged' if r.diverged else f'{r.abs_bias:.2f}'}"
                     f"({r.failures} failed fits)")
    untrimmed = run_benchmark((2,), (1000,), ("iptw",), reps=100, seed=SEED,
                              config=BenchmarkConfig(trim_cap=None), workers=WORKERS)
    u = untrimmed.row(2, 1000, "iptw")
    info(2, f"untrimmed IPTW {'diverged' if u.diverged else f'abs_bias={u.abs_bias:.2f}'} "
            f"({u.failures} failed fits)")
    ok = finite and all(verdicts)
    report(2, ok, f"matching abs_bias={m.abs_bias:.2f} mse={m.mse:.2f}; " + ", ".join(parts)
           + " (each must be diverged or >= 2x matching)")
    assert ok


# --- 3: consistency trend ---------------------------------------------------------------

def test_criterion_3_consistency_trend():
    sizes = (200, 1000, 5000)
    rep = run_benchmark((1,), sizes, ("matching",), reps=50, seed=SEED, workers=WORKERS)
    truth = true_erf(evaluation_points(1))
    errors = {}
    for n in sizes:
        curves = rep.curves[(1, n, "matching")]
        errors[n] = np.array([np.mean(np.abs(c - truth)) if c is not None else np.inf
                              for c in curves])
    medians = {n: float(np.median(errors[n])) for n in sizes}
    wins = int(np.sum(errors[5000] < errors[200]))
    p = binomtest(wins, 50, 0.5, alternative="greater").pvalue
    for n in sizes:
        info(3, f"N={n}: abs_bias={rep.row(1, n, 'matching').abs_bias:.3f}")
    ok = medians[5000] < medians[1000] < medians[200] and p < 0.05
    report(3, ok, "median integrated |error| "
           + " > ".join(f"{medians[n]:.3f} (N={n})" for n in sizes)
           + f"; N=5000 beats N=200 in {wins}/50 replicates, sign test p={p:.2g}")
    assert ok


# --- 4: balance improvement -------------------------------------------------------------

def _balance_seed(seed):
    data = generate(Scenario(1, 5000, seed=seed)).without_outcomes()
    model = fit_gps(data)
    surface = gps_surface(model, data)
    best = tune(data, surface, grid_trim=0.01)
    lo, hi = exposure_window(data.exposures, 0.01)
    grid = grid_from_range(lo, hi, best.delta)
    design = run_design(data, PipelineConfig(lam=best.lam, delta=best.delta), model=model,
                        grid=grid)
    cmp = balance_report(data, design.matched)
    return (best.lam, best.delta, cmp.pre.avg_abs_corr, cmp.post.avg_abs_corr,
            cmp.post.per_covariate_abs_corr)


def test_criterion_4_balance_improvement():
    with ProcessPoolExecutor(max_workers=WORKERS) as pool:
        rows = list(pool.map(_balance_seed, range(10)))
    all_below = 0
    improved = 0
    for seed, (lam, delta, pre, post, per) in enumerate(rows):
        all_below += bool(np.all(per < 0.10))
        improved += post < pre
        info(4, f"seed {seed}: lambda={lam} delta={delta:.3f} avg corr {pre:.3f} -> {post:.3f}, "
                f"max post corr {per.max():.3f}")
    ok = all_below >= 8 and improved == 10
    report(4, ok, f"all post correlations < 0.10 in {all_below}/10 seeds (need >= 8); "
                  f"post avg < pre avg in {improved}/10 (need 10)")
    assert ok


# --- 5: oracle equivalence --------------------------------------------------------------

def test_criterion_5_oracle_equivalence():
    start = time.time()
    rng = np.random.default_rng(SEED)
    compared = mismatched = conserved_fail = 0
    for k in range(100):
        n = int(rng.integers(10, 201))
        ds = linear_dataset(n, int(rng.integers(1, 4)), SEED + k, outcomes=False)
        surface = gps_surface(fit_gps(ds), ds)
        lo, hi = ds.exposure_range
        grid = grid_from_range(lo, hi, float(rng.uniform(0.05, 0.3)) * (hi - lo))
        for metric in ("l1", "l2"):
            for lam in (0.0, 0.5, 1.0):
                config = MatchConfig(grid.caliper, lam, metric)
                matched = build_matched_set(ds, surface, grid, config)
                for i in np.flatnonzero(matched.matched):
                    conserved_fail += matched.multiplicity[i].sum() != n
                level = float(grid.levels[rng.integers(grid.count)])
                picks = match_at_level(level, ds, surface, config)
                if picks is None:
                    continue
                compared += 1
                oracle = brute_force(level, ds, surface, lam, metric, grid.caliper)
                mismatched += not np.array_equal(picks, oracle)
    elapsed = time.time() - start
    ok = mismatched == 0 and conserved_fail == 0 and compared > 0 and elapsed < 60
    report(5, ok, f"{compared} level scans vs brute force, {mismatched} mismatches; "
                  f"{conserved_fail} multiplicity violations; {elapsed:.1f}s")
    assert ok


# --- 6: estimator identities ------------------------------------------------------------

def test_criterion_6_estimator_identities():
    # dual routes and affine equivariance on matched sets
    dual_err = affine_err = 0.0
    exact_scale = True
    for seed in range(20):
        ds = linear_dataset(150, 3, seed)
        design = ds.without_outcomes()
        surface = gps_surface(fit_gps(design), design)
        lo, hi = ds.exposure_range
        grid = grid_from_range(lo, hi, (hi - lo) / 16)
        for m in (1, 2):
            matched = build_matched_set(design, surface, grid, MatchConfig(grid.caliper, 0.5,
                                                                           "l1", m))
            full = matched.with_outcomes(ds)
            a = matching_point_estimates(full, "multiplicity")
            b = matching_point_estimates(full, "imputed")
            dual_err = max(dual_err, float(np.max(np.abs(a - b))))
            doubled = matched.with_outcomes(Dataset(ds.exposures, ds.covariates, 2 * ds.outcomes))
            exact_scale &= np.array_equal(matching_point_estimates(doubled), 2 * a)
            moved = Dataset(ds.exposures, ds.covariates, -3.0 * ds.outcomes + 7.0)
            est = smooth_erf(matching_estimate(full), bandwidth=1.0)
            est_m = smooth_erf(matching_estimate(matched.with_outcomes(moved)), bandwidth=1.0)
            affine_err = max(affine_err,
                             float(np.max(np.abs(est_m.point - (-3.0 * est.point + 7.0)))),
                             float(np.max(np.abs(est_m.smoothed - (-3.0 * est.smoothed + 7.0)))))

    # doubly robust estimator with an exact outcome model on noiseless linear data
    rng = np.random.default_rng(SEED)
    n = 500
    c = rng.normal(size=(n, 3))
    w = 5 + c @ [1.0, -0.5, 0.3] + rng.normal(size=n)
    y = 1.5 + 0.7 * w + c @ [2.0, -1.0, 0.5]
    ds = Dataset(w, c, y)
    surface = gps_surface(fit_gps(ds), ds)
    levels = np.linspace(3.5, 6.5, 7)
    dr = dr_estimate(ds, surface, levels, OutcomeModelConfig(degree=1),
                     SmootherConfig(kind="local-linear", bandwidth=1.5))
    truth = 1.5 + 0.7 * levels + c.mean(axis=0) @ [2.0, -1.0, 0.5]
    dr_err = float(np.max(np.abs(dr.point - truth)))

    # stabilized weights without confounding
    flat = GpsModel("normal-linear", {"intercept": 5.0, "coef": np.zeros(3)}, 1.2, n, 3, 0.0)
    raw, _ = stabilized_weights(ds, gps_surface(flat, ds), None)
    weight_err = float(np.max(np.abs(raw - 1.0)))

    ok = (dual_err <= 1e-12 and exact_scale and affine_err <= 1e-9 and dr_err <= 1e-8
          and weight_err <= 1e-10)
    report(6, ok, f"dual-route max diff {dual_err:.1e} (<=1e-12); power-of-two scaling "
                  f"{'bit-exact' if exact_scale else 'NOT exact'}; affine max diff "
                  f"{affine_err:.1e}; DR identity {dr_err:.1e} (<=1e-8); "
                  f"stabilized weights {weight_err:.1e} (<=1e-10)")
    assert ok


# --- 7: bootstrap coverage --------------------------------------------------------------

def _coverage_replicate(r):
    data = generate(Scenario(1, 1000), scenario_rng(SEED, 1, 1000, r))
    band = bootstrap_band(data, PipelineConfig(), BootstrapConfig(replicates=200, seed=r))
    lo, hi = np.percentile(data.exposures, [10, 90])
    interior = (band.levels >= lo) & (band.levels <= hi) & band.defined
    truth = true_erf(band.levels[interior])
    hits = (band.ci_lo[interior] <= truth) & (truth <= band.ci_hi[interior])
    return int(hits.sum()), int(interior.sum())


def test_criterion_7_bootstrap_coverage():
    start = time.time()
    with ProcessPoolExecutor(max_workers=WORKERS) as pool:
        results = list(pool.map(_coverage_replicate, range(100)))
    elapsed = time.time() - start
    hits = sum(h for h, _ in results)
    total = sum(t for _, t in results)
    coverage = hits / total
    ok = 0.85 <= coverage <= 0.99 and elapsed < 1800
    report(7, ok, f"pointwise coverage {coverage:.3f} over {total} interior level-replicates "
                  f"(target [0.85, 0.99]); {elapsed:.0f}s")
    assert ok


# --- 8: full-scale items ----------------------------------------------------------------

NOT_REPRODUCED = (
    "the Medicare application on 68.5M individuals (data not available; the Poisson "
    "rate-ratio code path is covered by unit tests on simulated counts)",
    "the 500-replicate, 18-cell (6 scenarios x N in {200, 1000, 5000}) simulation tables; "
    "desk-scale cells are covered by criteria 1-3, and the full sweep runs with --run-slow",
)


def test_criterion_8_full_scale_items_stated():
    for item in NOT_REPRODUCED:
        info(8, "not reproduced: " + item)
    report(8, True, "full-scale items stated as not reproduced; opt-in sweep "
                    "test_full_simulation_sweep runs with --run-slow")


@pytest.mark.slow
@pytest.mark.parametrize("learner", ["normal-linear", "boosted-stumps-normal"])
def test_full_simulation_sweep(tmp_path, learner):
    reps = int(os.environ.get("GPSMATCH_SWEEP_REPS", "500"))
    rep = run_benchmark(range(1, 7), (200, 1000, 5000), ("matching", "adjustment", "iptw", "dr"),
                        reps=reps, seed=SEED, config=BenchmarkConfig(gps_learner=learner),
                        workers=WORKERS)
    out = tmp_path / f"sweep_{learner}.csv"
    rep.to_csv(out)
    print(out.read_text())
    assert all(not r.diverged for r in rep.rows if r.method == "matching")
