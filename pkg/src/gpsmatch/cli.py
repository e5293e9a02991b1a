"""Command-line front end.

Every setting has a flat dotted key (``matching.lambda``, ``bootstrap.reps``,
...). Settings come from built-in defaults, then an optional JSON config file,
then command-line flags, with later sources winning. The resolved settings
are written to ``manifest.json``, which can be passed back as ``--config`` to
reproduce a run exactly.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .balance import balance_report, compute_balance, raw_balance_data
from .data import Schema, load_dataset
from .errors import ConfigError, DataError, GpsMatchError, NumericalError
from .estimators import (OutcomeModelConfig, adjustment_estimate, dr_estimate,
                         iptw_estimate)
from .gps import fit_gps, gps_surface
from .inference import BootstrapConfig, bootstrap_band, with_band
from .pipeline import (PipelineConfig, design_grid, run_design,
                       run_matching_pipeline)
from .simulation import METHODS, BenchmarkConfig, run_benchmark
from .tuning import TuningGrid, tune

COMMANDS = ("estimate", "balance", "tune", "simulate", "bootstrap")
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _strs(text):
    if isinstance(text, (list, tuple)):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _opt_float(text):
    return None if text is None or text == "" else float(text)


def _opt_int(text):
    return None if text is None or text == "" else int(text)


def _bool(text):
    if isinstance(text, bool):
        return text
    return str(text).lower() in ("1", "true", "yes", "on")


@dataclass(frozen=True)
class Option:
    key: str
    flag: str
    convert: Callable[[Any], Any]
    default: Any
    help: str
    commands: tuple = COMMANDS


_DESIGN = ("estimate", "balance", "tune", "bootstrap")
_MATCHING = ("estimate", "balance", "bootstrap")
OPTIONS = (
    Option("input", "--input", str, None, "input CSV file", _DESIGN),
    Option("schema", "--schema", str, "exposure=w;outcome=y",
           "column roles, e.g. 'exposure=w;outcome=y;covariates=c1,c2;offset=t;id=uid'",
           _DESIGN),
    Option("seed", "--seed", _opt_int, None, "random seed (recorded in the manifest)"),
    Option("gps.learner", "--gps", str, "normal", "GPS learner: normal, poly or boost"),
    Option("gps.degree", "--gps-degree", int, 2, "degree of the polynomial GPS learner"),
    Option("gps.n_trees", "--gps-trees", int, 100, "boosting rounds of the boosted learner"),
    Option("gps.learning_rate", "--gps-learning-rate", float, 0.1, "boosting shrinkage"),
    Option("matching.lambda", "--lambda", float, 1.0, "weight of the GPS coordinate", _MATCHING),
    Option("matching.delta", "--delta", _opt_float, None, "caliper (default: rule of thumb)",
           _MATCHING + ("simulate",)),
    Option("matching.metric", "--metric", str, "l1", "matching distance: l1 or l2",
           _MATCHING + ("tune",)),
    Option("matching.matches", "--matches", int, 1, "matches per unit", _MATCHING + ("tune",)),
    Option("matching.gps_caliper", "--gps-caliper", _opt_float, None,
           "optional caliper on the standardized GPS", _MATCHING),
    Option("matching.grid_trim", "--grid-trim", float, 0.01,
           "exposure mass trimmed from each tail before laying out the grid",
           _MATCHING + ("tune",)),
    Option("balance.match", "--match", _bool, False,
           "also match and report post-matching balance", ("balance",)),
    Option("smoother.kernel", "--smoother", str, "epanechnikov",
           "kernel: uniform, epanechnikov or gaussian", ("estimate", "bootstrap")),
    Option("smoother.bandwidth", "--bandwidth", _opt_float, None,
           "smoothing bandwidth (default: cross-validated)", ("estimate", "bootstrap")),
    Option("estimate.method", "--method", str, "matching",
           "matching, adjustment, iptw or dr", ("estimate",)),
    Option("estimate.trim_cap", "--trim-cap", _opt_float, 10.0,
           "cap on stabilized weights for iptw", ("estimate",)),
    Option("estimate.variance", "--variance", _bool, False,
           "add plug-in variances to the matching curve", ("estimate",)),
    Option("tune.lambdas", "--lambdas", _floats, [round(0.1 * k, 1) for k in range(11)],
           "candidate lambdas (comma separated)", ("tune",)),
    Option("tune.deltas", "--deltas", _floats, [], "candidate calipers (default: 10/20/50/100 levels)",
           ("tune",)),
    Option("tune.utility", "--utility", str, "corr", "balance utility: corr or bias", ("tune",)),
    Option("simulate.scenarios", "--scenario", _ints, [1], "scenarios 1..6 (comma separated)",
           ("simulate",)),
    Option("simulate.sizes", "--n", _ints, [1000], "sample sizes (comma separated)",
           ("simulate",)),
    Option("simulate.reps", "--reps", int, 100, "replicates per cell", ("simulate",)),
    Option("simulate.methods", "--methods", _strs, list(METHODS),
           "methods (comma separated)", ("simulate",)),
    Option("bootstrap.reps", "--boot-reps", int, 200, "bootstrap replicates B", ("bootstrap",)),
    Option("bootstrap.m", "--m", _opt_int, None, "subsample size (default ceil(N^0.8))",
           ("bootstrap",)),
    Option("bootstrap.level", "--level", float, 0.95, "confidence level", ("bootstrap",)),
    Option("bootstrap.retune", "--retune", _bool, False,
           "re-select lambda inside every replicate", ("bootstrap",)),
    Option("workers", "--workers", int, None, "parallel workers (default: all cores)"),
)
_BY_KEY = {o.key: o for o in OPTIONS}


def parse_schema(text: str) -> Schema:
    """Parse ``exposure=w;outcome=y;covariates=c1,c2;offset=t;id=uid``."""
    fields = {}
    for part in str(text).split(";"):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"schema entry {part!r} is not of the form role=column")
        role, value = (s.strip() for s in part.split("=", 1))
        fields[role] = value
    unknown = set(fields) - {"exposure", "outcome", "covariates", "offset", "id"}
    if unknown:
        raise ConfigError(f"unknown schema roles {sorted(unknown)}")
    if "exposure" not in fields:
        raise ConfigError("schema must name the exposure column")
    covs = fields.get("covariates")
    return Schema(
        exposure=fields["exposure"],
        outcome=fields.get("outcome") or None,
        covariates=[c.strip() for c in covs.split(",")] if covs else None,
        offset=fields.get("offset") or None,
        unit_id=fields.get("id") or None,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpsmatch",
                                     description="GPS caliper matching for continuous exposures")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", help="JSON file with dotted keys (a manifest works too)")
        p.add_argument("--out", default=".", help="output directory")
        for opt in OPTIONS:
            if command in opt.commands:
                p.add_argument(opt.flag, dest=opt.key, default=argparse.SUPPRESS, help=opt.help)
    return parser


def resolve_settings(command: str, args: dict) -> dict:
    """Defaults, then the config file, then flags."""
    settings = {o.key: o.default for o in OPTIONS if command in o.commands}
    if args.get("config"):
        path = Path(args["config"])
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        file_settings = loaded.get("settings", loaded)
        if loaded.get("command") not in (None, command):
            raise ConfigError(f"config was written for {loaded['command']!r}, not {command!r}")
        for key, value in file_settings.items():
            if key not in settings:
                raise ConfigError(f"unknown or inapplicable setting {key!r} for {command}")
            settings[key] = value
    for key, value in args.items():
        if key in settings:
            settings[key] = value
    out = {}
    for key, value in settings.items():
        try:
            out[key] = None if value is None else _BY_KEY[key].convert(value)
        except (TypeError, ValueError):
            raise ConfigError(f"invalid value {value!r} for {key}") from None
    return out


def _learner_params(s: dict) -> dict:
    kind = s["gps.learner"]
    if kind in ("poly", "polynomial", "polynomial-normal"):
        return {"degree": s["gps.degree"]}
    if kind in ("boost", "boosted", "boosted-stumps-normal"):
        return {"n_trees": s["gps.n_trees"], "learning_rate": s["gps.learning_rate"]}
    return {}


def _pipeline_config(s: dict, workers: int) -> PipelineConfig:
    return PipelineConfig(
        lam=s.get("matching.lambda", 1.0), delta=s.get("matching.delta"),
        metric=s.get("matching.metric", "l1"), matches_per_unit=s.get("matching.matches", 1),
        gps_caliper=s.get("matching.gps_caliper"), learner=s["gps.learner"],
        learner_params=_learner_params(s), kernel=s.get("smoother.kernel", "epanechnikov"),
        bandwidth=s.get("smoother.bandwidth"), grid_trim=s.get("matching.grid_trim", 0.01),
        n_jobs=workers)


def _load(s: dict, with_outcome: bool):
    if not s.get("input"):
        raise ConfigError("--input is required")
    schema = parse_schema(s["schema"])
    if not with_outcome:
        # the outcome and offset columns are skipped, never parsed
        skipped = tuple(c for c in (schema.outcome, schema.offset) if c)
        schema = Schema(schema.exposure, None, schema.covariates, None, schema.unit_id, skipped)
    if with_outcome and schema.outcome is None:
        raise ConfigError("schema must name the outcome column")
    return load_dataset(s["input"], schema)


def _write_manifest(out: Path, command: str, s: dict) -> None:
    manifest = {"command": command, "version": __version__, "settings": s}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _design_outputs(out: Path, data, config: PipelineConfig):
    """Design stage on the outcome-free view; writes balance artifacts."""
    design = run_design(data.without_outcomes(), config)
    comparison = balance_report(data.without_outcomes(), design.matched)
    comparison.to_json(out / "balance.json")
    comparison.to_csv(out / "balance_pre_post.csv")
    return design


def cmd_estimate(s: dict, out: Path, workers: int) -> None:
    data = _load(s, with_outcome=True)
    config = _pipeline_config(s, workers)
    design = _design_outputs(out, data, config)
    method = s["estimate.method"]
    if method == "matching":
        result = run_matching_pipeline(data, config, model=design.model, grid=design.grid,
                                       variance=s["estimate.variance"])
        estimate = result.estimate
    else:
        surface = gps_surface(design.model, data.without_outcomes())
        levels = design.grid
        if method == "adjustment":
            estimate = adjustment_estimate(data, surface, levels, OutcomeModelConfig(degree=3))
        elif method == "iptw":
            estimate = iptw_estimate(data, surface, levels, s["estimate.trim_cap"])
        elif method == "dr":
            estimate = dr_estimate(data, surface, levels)
        else:
            raise ConfigError(f"unknown method {method!r}")
    estimate.to_csv(out / "erf.csv")


def cmd_balance(s: dict, out: Path, workers: int) -> None:
    data = _load(s, with_outcome=False)
    config = _pipeline_config(s, workers)
    if s["balance.match"] or s["matching.delta"] is not None:
        _design_outputs(out, data, config)
        return
    grid = design_grid(data, None, config.grid_trim)
    pre = compute_balance(raw_balance_data(data, grid))
    (out / "balance.json").write_text(json.dumps({"pre": pre.to_dict()}, indent=2) + "\n",
                                      encoding="utf-8")


def cmd_tune(s: dict, out: Path, workers: int) -> None:
    data = _load(s, with_outcome=False)
    model = fit_gps(data, s["gps.learner"], **_learner_params(s))
    surface = gps_surface(model, data)
    grid = TuningGrid(tuple(s["tune.lambdas"]), tuple(s["tune.deltas"]) or None, s["tune.utility"])
    result = tune(data, surface, grid, s["matching.metric"], s["matching.matches"],
                  s["matching.grid_trim"], n_jobs=workers)
    result.to_csv(out / "tuning.csv")
    print(f"lambda={result.lam!r} delta={result.delta!r} {result.utility_name}={result.utility!r}")


def cmd_simulate(s: dict, out: Path, workers: int) -> None:
    pipeline = PipelineConfig(delta=s["matching.delta"], learner=s["gps.learner"],
                              learner_params=_learner_params(s))
    config = BenchmarkConfig(gps_learner=s["gps.learner"], pipeline=pipeline)
    report = run_benchmark(s["simulate.scenarios"], s["simulate.sizes"], s["simulate.methods"],
                           s["simulate.reps"], s["seed"], config, workers=workers)
    report.to_csv(out / "simreport.csv")


def cmd_bootstrap(s: dict, out: Path, workers: int) -> None:
    data = _load(s, with_outcome=True)
    config = _pipeline_config(s, workers)
    design = _design_outputs(out, data, config)
    result = run_matching_pipeline(data, config, model=design.model, grid=design.grid)
    boot = BootstrapConfig(s["bootstrap.reps"], s["bootstrap.m"], s["seed"], s["bootstrap.level"],
                           retune=s["bootstrap.retune"], n_jobs=workers)
    band = bootstrap_band(data, config, boot, full=result.estimate, grid=design.grid)
    with_band(result.estimate, band).to_csv(out / "erf.csv")


HANDLERS = {"estimate": cmd_estimate, "balance": cmd_balance, "tune": cmd_tune,
            "simulate": cmd_simulate, "bootstrap": cmd_bootstrap}


def run(argv: Optional[list] = None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    try:
        settings = resolve_settings(command, args)
        if settings.get("seed") is None:
            settings["seed"] = int(np.random.SeedSequence().entropy % (2**63))
        workers = settings.pop("workers", None) or os.cpu_count() or 1
        out = Path(args.get("out", "."))
        out.mkdir(parents=True, exist_ok=True)
        with np.errstate(all="ignore"):
            HANDLERS[command](settings, out, workers)
        _write_manifest(out, command, settings)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, GpsMatchError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


def main() -> None:
    sys.exit(run())
