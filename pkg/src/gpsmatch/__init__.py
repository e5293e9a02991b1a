"""Generalized-propensity-score caliper matching for continuous exposures."""

__version__ = "0.1.0"

from .balance import BalanceReport, balance_report
from .data import Dataset, ExposureGrid, Schema, load_dataset, make_grid, save_dataset
from .estimators import (ErfEstimate, adjustment_estimate, dr_estimate, iptw_estimate,
                         matching_estimate, plug_in_variance, poisson_rate_fit, smooth_erf)
from .gps import GpsModel, evaluate_gps, fit_gps, gps_surface
from .inference import BootstrapConfig, bootstrap_band
from .matching import MatchConfig, MatchedSet, build_matched_set, match_at_level
from .pipeline import PipelineConfig, check_assumptions, default_caliper, run_matching_pipeline
from .simulation import Scenario, generate, run_benchmark, true_erf
from .tuning import TuningGrid, tune

__all__ = [
    "BalanceReport", "BootstrapConfig", "Dataset", "ErfEstimate", "ExposureGrid", "GpsModel",
    "MatchConfig", "MatchedSet", "PipelineConfig", "Scenario", "Schema", "TuningGrid",
    "adjustment_estimate", "balance_report", "bootstrap_band", "build_matched_set",
    "check_assumptions", "default_caliper", "dr_estimate", "evaluate_gps", "fit_gps",
    "generate", "gps_surface", "iptw_estimate", "load_dataset", "make_grid", "match_at_level",
    "matching_estimate", "plug_in_variance", "poisson_rate_fit", "run_benchmark",
    "run_matching_pipeline", "save_dataset", "smooth_erf", "true_erf", "tune",
]
