"""File formats: cohort CSVs, column mappings, configs, allocations and index files.

Config and mapping files are flat ``key = value`` text; ``#`` starts a
comment and list values are comma separated.  Every CSV or JSON this
package writes carries a ``format_version`` field.  Index files (validated
sets, weights) address subjects by ``row_id``, the 0-based position of the
data row in the cohort CSV.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .design import Allocation
from .errors import DataError
from .model import Cohort
from .strata import StratumKey

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MISSING = {"", "na", "nan", "null", "."}
TRUE_WORDS = {"1", "true", "yes", "t", "y"}
FALSE_WORDS = {"0", "false", "no", "f", "n"}


# ---------------------------------------------------------------------------
# key = value files


def parse_kv_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise DataError(f"{source}:{lineno}: empty key")
        if key in out:
            raise DataError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    return parse_kv_text(text, str(path))


def as_list(value: str) -> list:
    return [v.strip() for v in value.split(",") if v.strip()]


def as_bool(value: str, key: str = "value") -> bool:
    v = value.strip().lower()
    if v in TRUE_WORDS:
        return True
    if v in FALSE_WORDS:
        return False
    raise DataError(f"{key}: expected a boolean, got {value!r}")


def as_float(value: str, key: str = "value") -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"{key}: expected a number, got {value!r}") from None


def as_int(value: str, key: str = "value") -> int:
    try:
        return int(value)
    except ValueError:
        raise DataError(f"{key}: expected an integer, got {value!r}") from None


# ---------------------------------------------------------------------------
# mappings


@dataclass(frozen=True)
class ColumnMapping:
    time_column: str
    event_column: str
    surrogate_columns: tuple
    covariate_columns: tuple
    validated_flag_column: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "surrogate_columns", tuple(self.surrogate_columns))
        object.__setattr__(self, "covariate_columns", tuple(self.covariate_columns))
        names = self.columns()
        if len(set(names)) != len(names):
            raise DataError("column mapping names must be distinct")
        if not self.surrogate_columns:
            raise DataError("mapping needs at least one surrogate column")

    def columns(self) -> list:
        cols = [self.time_column, self.event_column, *self.surrogate_columns, *self.covariate_columns]
        if self.validated_flag_column:
            cols.append(self.validated_flag_column)
        return cols


@dataclass(frozen=True)
class DiscretizationSpec:
    """Interval upper bounds; ``None`` uses the ranks of the distinct observed times."""

    boundaries: Optional[tuple] = None
    drop_intermittent: bool = False
    end_of_study: Optional[float] = None

    def __post_init__(self):
        if self.boundaries is not None:
            b = tuple(float(v) for v in self.boundaries)
            if not b:
                raise DataError("boundaries must be non-empty")
            if b[0] <= 0 or any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
                raise DataError("boundaries must be positive and strictly increasing")
            object.__setattr__(self, "boundaries", b)
            if self.end_of_study is not None and self.end_of_study < b[-1]:
                raise DataError("end_of_study must not precede the last boundary")

    def study_end(self, times) -> float:
        if self.end_of_study is not None:
            return float(self.end_of_study)
        if self.boundaries is not None:
            return self.boundaries[-1]
        return float(np.max(times))


def read_mapping(path):
    """``(ColumnMapping, DiscretizationSpec)`` from a mapping file.

    Keys: ``time``, ``event``, ``surrogate``, ``covariates``, optional
    ``validated_flag``, ``boundaries``, ``drop_intermittent``,
    ``end_of_study``.
    """
    kv = read_kv_file(path)
    known = {"time", "event", "surrogate", "covariates", "validated_flag", "boundaries",
             "drop_intermittent", "end_of_study"}
    unknown = set(kv) - known
    if unknown:
        raise DataError(f"{path}: unknown mapping keys {sorted(unknown)}")
    for req in ("time", "event", "surrogate"):
        if req not in kv:
            raise DataError(f"{path}: missing mapping key {req!r}")
    mapping = ColumnMapping(kv["time"], kv["event"], as_list(kv["surrogate"]),
                            as_list(kv.get("covariates", "")), kv.get("validated_flag") or None)
    bounds = kv.get("boundaries")
    spec = DiscretizationSpec(
        tuple(as_float(v, "boundaries") for v in as_list(bounds)) if bounds else None,
        as_bool(kv.get("drop_intermittent", "false"), "drop_intermittent"),
        as_float(kv["end_of_study"], "end_of_study") if "end_of_study" in kv else None,
    )
    return mapping, spec


def write_mapping(path, mapping: ColumnMapping, spec: DiscretizationSpec = DiscretizationSpec()) -> None:
    lines = [f"time = {mapping.time_column}", f"event = {mapping.event_column}",
             f"surrogate = {', '.join(mapping.surrogate_columns)}",
             f"covariates = {', '.join(mapping.covariate_columns)}"]
    if mapping.validated_flag_column:
        lines.append(f"validated_flag = {mapping.validated_flag_column}")
    if spec.boundaries is not None:
        lines.append("boundaries = " + ", ".join(repr(b) for b in spec.boundaries))
    lines.append(f"drop_intermittent = {str(spec.drop_intermittent).lower()}")
    if spec.end_of_study is not None:
        lines.append(f"end_of_study = {spec.end_of_study!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# cohort CSV


@dataclass
class LoadedCohort:
    """A parsed cohort file.

    ``row_ids`` are the file positions of the kept rows, ``times`` the raw
    continuous times, ``validated`` the cohort positions flagged validated
    (``None`` without a flag column).
    """

    cohort: Cohort
    row_ids: np.ndarray
    times: np.ndarray
    events: np.ndarray
    validated: Optional[np.ndarray]
    dropped: int = 0
    warnings: list = field(default_factory=list)

    def positions(self, row_ids) -> np.ndarray:
        """Cohort positions of file ``row_ids``; unknown or dropped rows are errors."""
        lookup = {int(r): i for i, r in enumerate(self.row_ids)}
        out = []
        for r in row_ids:
            if int(r) not in lookup:
                raise DataError(f"row_id {int(r)} is not part of the loaded cohort")
            out.append(lookup[int(r)])
        return np.asarray(out, dtype=np.int64)


def _cell_float(value, row, col, allow_missing=False):
    v = value.strip()
    if v.lower() in MISSING:
        if allow_missing:
            return math.nan
        raise DataError(f"row {row}: column {col!r} is empty")
    try:
        x = float(v)
    except ValueError:
        raise DataError(f"row {row}: column {col!r} is not numeric ({value!r})") from None
    if not math.isfinite(x):
        raise DataError(f"row {row}: column {col!r} is not finite")
    return x


def _cell_event(value, row, col):
    v = value.strip().lower()
    if v in TRUE_WORDS:
        return True
    if v in FALSE_WORDS:
        return False
    raise DataError(f"row {row}: column {col!r} must be 0/1, got {value!r}")


def _cell_int(value, row, col):
    x = _cell_float(value, row, col)
    if x != int(x):
        raise DataError(f"row {row}: column {col!r} must be an integer code, got {value!r}")
    return int(x)


def load_cohort(path, mapping: ColumnMapping, spec: DiscretizationSpec = DiscretizationSpec(),
                drop_warn_fraction: float = 0.2) -> LoadedCohort:
    """Parse a cohort CSV and discretise its times.

    A row with an event time ``t`` gets the smallest interval ``j`` with
    ``t <= boundaries[j-1]``; times past the last boundary are censored in
    the last interval.  With ``drop_intermittent`` rows censored before the
    end of study are excluded and counted.  Covariate cells may be empty
    for unvalidated subjects.  Errors name the 0-based data row.
    """
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        missing = [c for c in mapping.columns() if c not in header]
        if missing:
            raise DataError(f"{path}: columns not in header: {', '.join(missing)}")
        times, events, z, X, flags = [], [], [], [], []
        for row, rec in enumerate(reader):
            if None in rec or any(v is None for v in rec.values()):
                raise DataError(f"row {row}: wrong number of fields")
            t = _cell_float(rec[mapping.time_column], row, mapping.time_column)
            if t <= 0:
                raise DataError(f"row {row}: time must be positive, got {t}")
            times.append(t)
            events.append(_cell_event(rec[mapping.event_column], row, mapping.event_column))
            z.append([_cell_int(rec[c], row, c) for c in mapping.surrogate_columns])
            if any(code < 0 for code in z[-1]):
                raise DataError(f"row {row}: surrogate codes must be non-negative")
            X.append([_cell_float(rec[c], row, c, allow_missing=True) for c in mapping.covariate_columns])
            if mapping.validated_flag_column:
                flags.append(_cell_event(rec[mapping.validated_flag_column], row,
                                         mapping.validated_flag_column))
    if not times:
        raise DataError(f"{path}: no data rows")

    times = np.asarray(times)
    events = np.asarray(events)
    X = np.asarray(X, dtype=float).reshape(len(times), len(mapping.covariate_columns))
    row_ids = np.arange(len(times))
    notes = []
    keep = np.ones(len(times), dtype=bool)
    end = spec.study_end(times)
    if spec.drop_intermittent:
        keep = events | (times >= end)
    dropped = int((~keep).sum())
    if dropped:
        notes.append(f"dropped {dropped} rows censored before the end of study ({end})")
    if dropped > drop_warn_fraction * len(times):
        msg = f"{dropped} of {len(times)} rows ({dropped / len(times):.0%}) dropped as intermittently censored"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)

    t_k, ev_k = times[keep], events[keep]
    if spec.boundaries is not None:
        b = np.asarray(spec.boundaries)
        beyond = t_k > b[-1]
        idx = np.searchsorted(b, np.minimum(t_k, b[-1]), side="left") + 1
        ev_idx = ev_k & ~beyond
        J = b.size
    else:
        uniq = np.unique(t_k)
        idx = np.searchsorted(uniq, t_k) + 1
        ev_idx = ev_k
        J = uniq.size
    z_arr = np.asarray(z, dtype=np.int64).reshape(len(times), -1)[keep]
    names = mapping.covariate_columns
    cohort = Cohort(idx, ev_idx, z_arr, X[keep], J, names)
    validated = None
    if mapping.validated_flag_column:
        validated = np.flatnonzero(np.asarray(flags)[keep])
    return LoadedCohort(cohort, row_ids[keep], t_k, ev_k, validated, dropped, notes)


def write_cohort_csv(path, cohort: Cohort, times=None, validated=None,
                     covariates_for_all: bool = False) -> ColumnMapping:
    """Write ``cohort`` in the layout :func:`load_cohort` reads; returns the mapping.

    Without ``times`` the time index itself is written, which reloads
    exactly with boundaries ``1, 2, ..., J``.  Covariates are written only
    for ``validated`` rows unless ``covariates_for_all``.
    """
    N = cohort.size
    times = cohort.time_index.astype(float) if times is None else np.asarray(times, float)
    zc = [f"z{k + 1}" for k in range(cohort.surrogate.shape[1])]
    xc = list(cohort.covariate_names)
    show = np.ones(N, dtype=bool) if covariates_for_all or validated is None else np.zeros(N, dtype=bool)
    flag = np.zeros(N, dtype=bool)
    if validated is not None:
        show[np.asarray(validated)] = True
        flag[np.asarray(validated)] = True
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "event", *zc, *xc, "validated"])
        for i in range(N):
            xs = [repr(float(v)) if show[i] and np.isfinite(v) else "" for v in cohort.covariates[i]]
            w.writerow([repr(float(times[i])), int(cohort.event[i]),
                        *[int(v) for v in cohort.surrogate[i]], *xs, int(flag[i])])
    return ColumnMapping("time", "event", tuple(zc), tuple(xc), "validated")


# ---------------------------------------------------------------------------
# index, weight and allocation files


def read_row_ids(path, column: str = "row_id") -> np.ndarray:
    rows = _read_csv(path, [column])
    out = []
    for i, rec in enumerate(rows):
        v = _cell_float(rec[column], i, column)
        if v != int(v) or v < 0:
            raise DataError(f"{path}: row {i}: row_id must be a non-negative integer")
        out.append(int(v))
    if len(set(out)) != len(out):
        raise DataError(f"{path}: duplicate row_id values")
    return np.asarray(out, dtype=np.int64)


def write_row_ids(path, row_ids) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_id", "format_version"])
        for r in row_ids:
            w.writerow([int(r), FORMAT_VERSION])


def read_weights(path):
    """``(row_ids, weights)`` from a CSV with ``row_id`` and ``weight`` columns."""
    rows = _read_csv(path, ["row_id", "weight"])
    ids, ws = [], []
    for i, rec in enumerate(rows):
        r = _cell_float(rec["row_id"], i, "row_id")
        w = _cell_float(rec["weight"], i, "weight")
        if r != int(r) or r < 0:
            raise DataError(f"{path}: row {i}: row_id must be a non-negative integer")
        if w <= 0:
            raise DataError(f"{path}: row {i}: weight must be positive")
        ids.append(int(r))
        ws.append(w)
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate row_id values")
    return np.asarray(ids, dtype=np.int64), np.asarray(ws)


def write_weights(path, row_ids, weights) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_id", "weight", "format_version"])
        for r, v in zip(row_ids, weights):
            w.writerow([int(r), repr(float(v)), FORMAT_VERSION])


ALLOCATION_HEADER = ["stratum", "time_index", "event", "surrogate", "N", "count", "format_version"]


def write_allocation(path, allocation: Allocation, phase_one: dict) -> None:
    keys = sorted(set(phase_one) | set(allocation.counts))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ALLOCATION_HEADER)
        for k in keys:
            w.writerow([k.serialize(), k.time_index, int(k.event), ",".join(map(str, k.surrogate)),
                        phase_one.get(k, 0), allocation[k], FORMAT_VERSION])


def read_allocation(path) -> Allocation:
    rows = _read_csv(path, ["stratum", "count"])
    counts = {}
    for i, rec in enumerate(rows):
        key = StratumKey.parse(rec["stratum"])
        c = _cell_float(rec["count"], i, "count")
        if c != int(c) or c < 0:
            raise DataError(f"{path}: row {i}: count must be a non-negative integer")
        counts[key] = int(c)
    return Allocation(counts, sum(counts.values()))


def _read_csv(path, required) -> list:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in required if c not in header]
            if missing:
                raise DataError(f"{path}: missing columns {', '.join(missing)}")
            return list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def write_json(path, payload: dict) -> None:
    payload = {"format_version": FORMAT_VERSION, **payload}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
