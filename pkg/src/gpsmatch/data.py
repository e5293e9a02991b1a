"""Core domain types, validation and CSV ingestion."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CaliperError, DataError, ParseError, SchemaError, SizeError

DEFAULT_GPS_FLOOR = 1e-10


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observational table: exposure, covariates, optional outcome and offset.

    ``outcomes`` may be ``None``; such a dataset is a *design view* and is what
    the outcome-blind stages (GPS fitting, matching, balance, tuning) operate on.
    Arrays are copied and made read-only on construction.
    """

    exposures: np.ndarray
    covariates: np.ndarray
    outcomes: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None
    unit_ids: Optional[np.ndarray] = None
    covariate_names: tuple = ()

    def __post_init__(self):
        w = _frozen(self.exposures).reshape(-1)
        c = np.array(self.covariates, dtype=float, copy=True)
        if c.ndim == 1:
            c = c.reshape(-1, 1)
        c.setflags(write=False)
        n = w.shape[0]
        if n < 2:
            raise SizeError(f"need at least 2 units, got {n}")
        if c.shape[0] != n:
            raise DataError(f"covariates have {c.shape[0]} rows, exposures {n}")
        if not np.all(np.isfinite(w)):
            bad = int(np.flatnonzero(~np.isfinite(w))[0])
            raise ParseError(f"non-finite exposure at row {bad}", row=bad)
        if not np.all(np.isfinite(c)):
            bad = int(np.argwhere(~np.isfinite(c))[0, 0])
            raise ParseError(f"non-finite covariate at row {bad}", row=bad)
        if not w.max() > w.min():
            raise DataError("exposure range is degenerate (max == min)")
        if c.shape[1] and np.any(c.var(axis=0) <= 0):
            names = self.covariate_names or tuple(f"c{k + 1}" for k in range(c.shape[1]))
            const = [names[k] for k in np.flatnonzero(c.var(axis=0) <= 0)]
            raise DataError(f"covariates with zero variance: {const}")
        object.__setattr__(self, "exposures", w)
        object.__setattr__(self, "covariates", c)

        if self.outcomes is not None:
            y = _frozen(self.outcomes).reshape(-1)
            if y.shape[0] != n:
                raise DataError(f"outcomes have length {y.shape[0]}, expected {n}")
            if not np.all(np.isfinite(y)):
                bad = int(np.flatnonzero(~np.isfinite(y))[0])
                raise ParseError(f"non-finite outcome at row {bad}", row=bad)
            object.__setattr__(self, "outcomes", y)
        if self.offsets is not None:
            o = _frozen(self.offsets).reshape(-1)
            if o.shape[0] != n:
                raise DataError(f"offsets have length {o.shape[0]}, expected {n}")
            if not np.all(np.isfinite(o) & (o > 0)):
                bad = int(np.flatnonzero(~(np.isfinite(o) & (o > 0)))[0])
                raise ParseError(f"offset must be positive and finite (row {bad})", row=bad)
            object.__setattr__(self, "offsets", o)
        ids = self.unit_ids
        if ids is None:
            ids = np.arange(n)
        ids = np.array(ids, copy=True)
        if ids.shape[0] != n:
            raise DataError("unit_ids length mismatch")
        ids.setflags(write=False)
        object.__setattr__(self, "unit_ids", ids)
        names = tuple(self.covariate_names) or tuple(f"c{k + 1}" for k in range(c.shape[1]))
        if len(names) != c.shape[1]:
            raise DataError("covariate_names length mismatch")
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.exposures.shape[0]

    @property
    def q(self) -> int:
        return self.covariates.shape[1]

    @property
    def exposure_range(self) -> tuple[float, float]:
        return float(self.exposures.min()), float(self.exposures.max())

    @property
    def has_outcomes(self) -> bool:
        return self.outcomes is not None

    def without_outcomes(self) -> "Dataset":
        """Design view: identical units with the outcome column dropped."""
        return Dataset(self.exposures, self.covariates, None, None, self.unit_ids,
                       self.covariate_names)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.exposures[index],
            self.covariates[index],
            None if self.outcomes is None else self.outcomes[index],
            None if self.offsets is None else self.offsets[index],
            self.unit_ids[index],
            self.covariate_names,
        )

    def summary(self) -> dict:
        lo, hi = self.exposure_range
        return {"n": self.n, "q": self.q, "exposure_min": lo, "exposure_max": hi}


@dataclass(frozen=True, eq=False)
class ExposureGrid:
    """Equally spaced exposure levels ``origin + (2i - 1) * caliper``, i = 1..count."""

    levels: np.ndarray
    caliper: float
    origin: float
    count: int

    def __post_init__(self):
        object.__setattr__(self, "levels", _frozen(self.levels))

    def block_bounds(self, i: int) -> tuple[float, float]:
        w = self.levels[i]
        return w - self.caliper, w + self.caliper

    def assign_blocks(self, exposures) -> np.ndarray:
        """Block index for each exposure, or -1 if it falls below the origin.

        Blocks are half-open ``[w_i - d, w_i + d)``; the last block is closed and
        additionally absorbs everything above ``origin + 2 * count * caliper``.
        """
        w = np.asarray(exposures, dtype=float)
        idx = np.floor((w - self.origin) / (2.0 * self.caliper)).astype(np.int64)
        idx = np.minimum(idx, self.count - 1)
        idx[w < self.origin] = -1
        return idx


def make_grid(dataset: Dataset, caliper: float) -> ExposureGrid:
    """Exposure grid with ``floor((w1 - w0) / (2 * caliper) + 1/2)`` levels."""
    lo, hi = dataset.exposure_range
    return grid_from_range(lo, hi, caliper)


def grid_from_range(lo: float, hi: float, caliper: float) -> ExposureGrid:
    span = hi - lo
    if not (math.isfinite(caliper) and caliper > 0):
        raise CaliperError(f"caliper must be positive, got {caliper}")
    if not caliper < span / 2:
        raise CaliperError(
            f"caliper {caliper} must be smaller than half the exposure range ({span / 2})"
        )
    count = int(math.floor(span / (2.0 * caliper) + 0.5))
    levels = lo + (2.0 * np.arange(1, count + 1) - 1.0) * caliper
    return ExposureGrid(levels=levels, caliper=float(caliper), origin=float(lo), count=count)


@dataclass(frozen=True)
class AssumptionReport:
    """Empirical diagnostics for the positivity assumption.

    ``overlap_flags[i]`` is True when some unit in block ``i`` has an estimated
    GPS below ``gps_floor``.
    """

    overlap_flags: np.ndarray
    gps_floor: float
    unmatched_levels: list = field(default_factory=list)

    @property
    def any_overlap_problem(self) -> bool:
        return bool(np.any(self.overlap_flags))


@dataclass(frozen=True)
class Schema:
    """Column-name mapping for CSV ingestion.

    ``covariates=None`` means every column not claimed by another role.
    ``outcome=None`` loads a design view without outcomes; columns listed in
    ``ignore`` are never read.
    """

    exposure: str
    outcome: Optional[str] = None
    covariates: Optional[Sequence[str]] = None
    offset: Optional[str] = None
    unit_id: Optional[str] = None
    ignore: tuple = ()


def _parse_cell(text, column, row):
    if text is None or text.strip() == "":
        raise ParseError(f"row {row}: blank value in column {column!r}", row=row)
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"row {row}: cannot parse {text!r} in column {column!r}", row=row) from None
    if not math.isfinite(value):
        raise ParseError(f"row {row}: non-finite value {text!r} in column {column!r}", row=row)
    return value


def load_dataset(path, schema: Schema) -> Dataset:
    """Read a UTF-8, comma-delimited CSV with a header row into a Dataset.

    Row indices in error messages are 0-based data rows (the header excluded).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SizeError(f"{path} is empty") from None
        rows = list(reader)

    def col(name):
        if name not in header:
            raise SchemaError(f"column {name!r} not found in {path.name}")
        return header.index(name)

    claimed = [schema.exposure, schema.outcome, schema.offset, schema.unit_id, *schema.ignore]
    if schema.covariates is None:
        cov_names = [h for h in header if h not in claimed]
    else:
        cov_names = list(schema.covariates)
    w_col = col(schema.exposure)
    y_col = col(schema.outcome) if schema.outcome else None
    o_col = col(schema.offset) if schema.offset else None
    id_col = col(schema.unit_id) if schema.unit_id else None
    c_cols = [col(name) for name in cov_names]

    rows = [r for r in rows if any(cell.strip() for cell in r)]
    n = len(rows)
    if n < 2:
        raise SizeError(f"need at least 2 data rows, found {n}")
    w = np.empty(n)
    c = np.empty((n, len(c_cols)))
    y = np.empty(n) if y_col is not None else None
    off = np.empty(n) if o_col is not None else None
    ids = []
    for r, cells in enumerate(rows):
        if len(cells) < len(header):
            raise ParseError(f"row {r}: expected {len(header)} fields, got {len(cells)}", row=r)
        w[r] = _parse_cell(cells[w_col], schema.exposure, r)
        for k, cc in enumerate(c_cols):
            c[r, k] = _parse_cell(cells[cc], cov_names[k], r)
        if y is not None:
            y[r] = _parse_cell(cells[y_col], schema.outcome, r)
        if off is not None:
            off[r] = _parse_cell(cells[o_col], schema.offset, r)
        ids.append(cells[id_col] if id_col is not None else r)
    return Dataset(w, c, y, off, np.array(ids), tuple(cov_names))


def save_dataset(dataset: Dataset, path, exposure="w", outcome="y", offset="offset",
                 unit_id=None) -> None:
    """Write a Dataset as CSV; floats use ``repr`` so reloading is bit-exact."""
    header = [exposure]
    if dataset.outcomes is not None:
        header.append(outcome)
    if dataset.offsets is not None:
        header.append(offset)
    if unit_id:
        header.append(unit_id)
    header.extend(dataset.covariate_names)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for j in range(dataset.n):
            row = [repr(float(dataset.exposures[j]))]
            if dataset.outcomes is not None:
                row.append(repr(float(dataset.outcomes[j])))
            if dataset.offsets is not None:
                row.append(repr(float(dataset.offsets[j])))
            if unit_id:
                row.append(str(dataset.unit_ids[j]))
            row.extend(repr(float(v)) for v in dataset.covariates[j])
            writer.writerow(row)
