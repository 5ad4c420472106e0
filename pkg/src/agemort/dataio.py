"""Reading mortality and population files, writing run outputs.

Observation files come either as CDC WONDER tab-separated exports or in a
simple canonical CSV layout ``year,bin_low,bin_high,deaths``. Both map onto
the 22 reporting age groups of :class:`~agemort.overdose.CoarseAgeBins`.
Run outputs are written as versioned JSON or as CSV plus a JSON sidecar
holding the metadata.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ParseError
from .overdose import DEFAULT_EDGES

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
N_BINS = len(DEFAULT_EDGES) - 1
MISSING_TOKENS = {"suppressed", "missing", "not applicable", "unreliable"}
CANONICAL_HEADER = ("year", "bin_low", "bin_high", "deaths")
PLOT_COLUMNS = ("year", "bin_low", "bin_high", "midpoint", "observed", "predicted_mean", "predicted_sd",
                "band_sigma", "band_lo", "band_hi")


@dataclass
class ObservationBatch:
    """Deaths per reporting age group for one calendar year.

    ``deaths`` is zero wherever ``suppressed_mask`` is set.
    """

    year: int
    deaths: np.ndarray
    suppressed_mask: np.ndarray

    def __post_init__(self):
        self.deaths = np.asarray(self.deaths, dtype=np.int64)
        self.suppressed_mask = np.asarray(self.suppressed_mask, dtype=bool)
        if self.deaths.shape != (N_BINS,) or self.suppressed_mask.shape != (N_BINS,):
            raise ParseError(f"year {self.year}: expected {N_BINS} age groups")
        if np.any(self.deaths < 0):
            raise ParseError(f"year {self.year}: negative death count")
        if np.any(self.deaths[self.suppressed_mask] != 0):
            raise ParseError(f"year {self.year}: suppressed entries must not carry counts")

    def as_observation(self, scale: float = 1.0) -> np.ndarray:
        """Counts divided by ``scale``; suppressed entries become NaN."""
        z = self.deaths / scale
        return np.where(self.suppressed_mask, np.nan, z)


@dataclass
class PopulationSeries:
    years: np.ndarray
    persons: np.ndarray

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=np.int64)
        self.persons = np.asarray(self.persons, dtype=float)
        if np.any(np.diff(self.years) <= 0):
            raise ParseError("population years must be strictly increasing")
        if np.any(self.persons <= 0):
            raise ParseError("population counts must be positive")

    def __len__(self):
        return len(self.years)


@dataclass
class RunOutput:
    """Per-step records plus the metadata needed to rerun the command.

    Each record is a flat mapping of column name to number (or ``None``);
    the first column is ``time``.
    """

    command: str
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        times = [r["time"] for r in self.records]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("record times must be strictly increasing")

    @property
    def columns(self) -> list:
        cols = []
        seen = set()
        for rec in self.records:
            for key in rec:
                if key not in seen:
                    seen.add(key)
                    cols.append(key)
        return cols


# --------------------------------------------------------------------------
# age labels


def bin_index(lo: float, hi: float, edges: Sequence[float] = DEFAULT_EDGES) -> int:
    """Index of the reporting group ``[lo, hi)``; raises KeyError if it is not one."""
    for i, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        if a == lo and b == hi:
            return i
    raise KeyError((lo, hi))


_LABELS = (
    (re.compile(r"^<\s*1(\s+years?)?$"), lambda m: (0.0, 1.0)),
    (re.compile(r"^(\d+)\s*-\s*(\d+)(\s+years?)?$"), lambda m: (float(m[1]), float(m[2]) + 1)),
    (re.compile(r"^(\d+)\s*\+(\s+years?)?$"), lambda m: (float(m[1]), DEFAULT_EDGES[-1])),
    (re.compile(r"^1$"), lambda m: (0.0, 1.0)),  # WONDER code for "< 1 year"
)


def parse_age_label(label: str) -> tuple:
    """``"15-19 years"`` -> ``(15.0, 20.0)``; ``"< 1 year"`` -> ``(0.0, 1.0)``; ``"100+ years"`` -> ``(100.0, 120.0)``."""
    text = label.strip().strip('"').strip()
    for pattern, make in _LABELS:
        m = pattern.match(text)
        if m:
            return make(m)
    raise KeyError(label)


def format_age_label(lo: float, hi: float) -> str:
    if lo == 0 and hi == 1:
        return "< 1 year"
    if hi == DEFAULT_EDGES[-1]:
        return f"{int(lo)}+ years"
    return f"{int(lo)}-{int(hi) - 1} years"


# --------------------------------------------------------------------------
# observation files


def _strip_bom(text: str) -> str:
    return text[1:] if text.startswith("\ufeff") else text


def _read_text(stream) -> str:
    return _strip_bom(stream if isinstance(stream, str) else stream.read())


def _count(token: str, lineno: int):
    """Parsed death count, or None for a missing-data token."""
    t = token.strip().strip('"').replace(",", "")
    if t.lower() in MISSING_TOKENS:
        return None
    try:
        value = float(t)
    except ValueError:
        raise ParseError(f"line {lineno}: cannot read death count {token!r}") from None
    if value < 0 or value != int(value):
        raise ParseError(f"line {lineno}: death count {token!r} is not a nonnegative integer")
    return int(value)


class _YearTable:
    def __init__(self):
        self.counts = {}

    def add(self, year, idx, value, lineno):
        row = self.counts.setdefault(year, {})
        if idx in row:
            raise ParseError(f"line {lineno}: duplicate age group for year {year}")
        row[idx] = value

    def batches(self) -> list:
        out = []
        for year in sorted(self.counts):
            row = self.counts[year]
            deaths = np.zeros(N_BINS, dtype=np.int64)
            mask = np.ones(N_BINS, dtype=bool)
            for idx, value in row.items():
                if value is not None:
                    deaths[idx] = value
                    mask[idx] = False
            absent = N_BINS - len(row)
            if absent:
                log.warning("year %d: %d age groups absent from the file; treated as missing", year, absent)
            out.append(ObservationBatch(year, deaths, mask))
        return out


def _find_column(header, *names, exclude_code=True):
    lowered = [h.strip().strip('"').lower() for h in header]
    for name in names:
        for i, h in enumerate(lowered):
            if h == name:
                return i
    for name in names:
        for i, h in enumerate(lowered):
            if name in h and not (exclude_code and h.endswith("code")):
                return i
    return None


def parse_wonder(stream) -> list:
    """Parse a WONDER tab-separated export into one batch per year.

    Rows flagged ``Total`` in the Notes column are checked against the
    per-year sums and otherwise skipped, as are ``Not Stated`` ages.
    Everything from the first ``---`` line on is ignored.
    """
    text = _read_text(stream)
    lines = text.splitlines()
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if line.strip().strip('"').startswith("---"):
            break
        if line.strip():
            rows.append((lineno, next(csv.reader([line], delimiter="\t"))))
    if not rows:
        raise ParseError("empty WONDER export")
    header_line, header = rows[0]
    year_col = _find_column(header, "year", exclude_code=True)
    if year_col is None:
        year_col = _find_column(header, "year code", exclude_code=False)
    if year_col is None:
        raise ParseError(f"line {header_line}: no year column in header")
    age_col = _find_column(header, "five-year age groups", "age group", "age groups")
    if age_col is None:
        age_col = _find_column(header, "five-year age groups code", "age group code", exclude_code=False)
    deaths_col = _find_column(header, "deaths")
    if age_col is None or deaths_col is None:
        raise ParseError(f"line {header_line}: header needs age group and deaths columns")
    notes_col = _find_column(header, "notes")

    table = _YearTable()
    totals = {}
    for lineno, row in rows[1:]:
        cell = lambda i: row[i].strip().strip('"').strip() if i is not None and i < len(row) else ""  # noqa: E731
        year_txt, age_txt = cell(year_col), cell(age_col)
        if cell(notes_col).lower() == "total":
            if year_txt and not age_txt:
                totals[int(year_txt)] = (_count(cell(deaths_col), lineno), lineno)
            continue
        if not year_txt:
            raise ParseError(f"line {lineno}: missing year")
        try:
            year = int(float(year_txt))
        except ValueError:
            raise ParseError(f"line {lineno}: cannot read year {year_txt!r}") from None
        if age_txt.lower() in ("not stated", "ns"):
            continue
        try:
            idx = bin_index(*parse_age_label(age_txt))
        except KeyError:
            raise ParseError(f"line {lineno}: unknown age group {age_txt!r}") from None
        table.add(year, idx, _count(cell(deaths_col), lineno), lineno)

    batches = table.batches()
    for b in batches:
        total = totals.get(b.year)
        if total and total[0] is not None and b.deaths.sum() > total[0]:
            raise ParseError(f"line {total[1]}: year {b.year} age groups sum to {b.deaths.sum()} > total {total[0]}")
    return batches


def format_wonder(batches: Iterable[ObservationBatch]) -> str:
    """Render batches as a minimal WONDER-style export (inverse of :func:`parse_wonder`)."""
    buf = io.StringIO()
    buf.write('"Notes"\t"Year"\t"Year Code"\t"Five-Year Age Groups"\t"Five-Year Age Groups Code"\t"Deaths"\n')
    edges = DEFAULT_EDGES
    for b in batches:
        for i in range(N_BINS):
            lo, hi = edges[i], edges[i + 1]
            label = format_age_label(lo, hi)
            code = label.replace(" years", "").replace(" year", "").replace("< 1", "1")
            value = "Suppressed" if b.suppressed_mask[i] else str(int(b.deaths[i]))
            buf.write(f'\t"{b.year}"\t"{b.year}"\t"{label}"\t"{code}"\t{value}\n')
        buf.write(f'"Total"\t"{b.year}"\t"{b.year}"\t\t\t{int(b.deaths.sum())}\n')
    buf.write('"---"\n"Dataset: Multiple Cause of Death"\n"---"\n')
    return buf.getvalue()


def parse_canonical(stream) -> list:
    """Parse the ``year,bin_low,bin_high,deaths`` layout; ``Suppressed`` or empty deaths mean missing."""
    text = _read_text(stream)
    reader = csv.reader(io.StringIO(text))
    table = _YearTable()
    header_seen = False
    for lineno, row in enumerate(reader, start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        if not header_seen:
            if tuple(c.strip().lower() for c in row) != CANONICAL_HEADER:
                raise ParseError(f"line {lineno}: expected header {','.join(CANONICAL_HEADER)}")
            header_seen = True
            continue
        if len(row) != 4:
            raise ParseError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            year = int(row[0])
            lo, hi = float(row[1]), float(row[2])
        except ValueError:
            raise ParseError(f"line {lineno}: cannot read year or bin edges") from None
        try:
            idx = bin_index(lo, hi)
        except KeyError:
            raise ParseError(f"line {lineno}: [{row[1]}, {row[2]}) is not a reporting age group") from None
        value = None if not row[3].strip() else _count(row[3], lineno)
        table.add(year, idx, value, lineno)
    if not header_seen:
        raise ParseError("missing header row")
    return table.batches()


def format_canonical(batches: Iterable[ObservationBatch]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CANONICAL_HEADER) + "\n")
    edges = DEFAULT_EDGES
    for b in batches:
        for i in range(N_BINS):
            value = "Suppressed" if b.suppressed_mask[i] else str(int(b.deaths[i]))
            buf.write(f"{b.year},{edges[i]:g},{edges[i + 1]:g},{value}\n")
    return buf.getvalue()


def read_observation_file(path) -> list:
    """Dispatch on content: a canonical header means canonical CSV, anything else is a WONDER export."""
    path = Path(path)
    try:
        text = _strip_bom(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    first = next((ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")), "")
    try:
        if first.replace(" ", "").lower() == ",".join(CANONICAL_HEADER):
            return parse_canonical(text)
        return parse_wonder(text)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def load_observations(data_dir) -> dict:
    """All observation files in ``data_dir`` (``*.txt``, ``*.tsv``, ``*.csv`` except ``population.csv``), keyed by year."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ParseError(f"data directory {data_dir} does not exist")
    out = {}
    for path in sorted(data_dir.iterdir()):
        if path.suffix.lower() not in (".txt", ".tsv", ".csv") or path.name == "population.csv":
            continue
        for batch in read_observation_file(path):
            if batch.year in out:
                raise ParseError(f"{path}: year {batch.year} already read from another file")
            out[batch.year] = batch
    return out


def parse_population(stream) -> PopulationSeries:
    """Two-column ``year,population`` CSV; a header row is optional."""
    text = _read_text(stream)
    years, persons = [], []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip():
            continue
        if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
            continue
        if len(row) != 2:
            raise ParseError(f"line {lineno}: expected year,population")
        try:
            years.append(int(row[0]))
            persons.append(float(row[1]))
        except ValueError:
            raise ParseError(f"line {lineno}: cannot read {row!r}") from None
    if not years:
        log.warning("population file is empty")
    try:
        return PopulationSeries(years, persons)
    except ParseError as exc:
        raise ParseError(f"population file: {exc}") from None


# --------------------------------------------------------------------------
# run outputs


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _uncell(text: str):
    if text == "":
        return None
    if re.fullmatch(r"-?\d+", text):
        return int(text)
    return float(text)


def _json_value(value):
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else repr(v)
    if isinstance(value, dict):
        return {str(k): _json_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_json_value(v) for v in value]
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _from_json_value(value):
    if value in ("nan", "inf", "-inf"):
        return float(value)
    return value


def _metadata_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def _dump(path: Path, text: str):
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_output(run: RunOutput, fmt: str, destination) -> Path:
    """Write ``run`` as JSON, or as CSV with the metadata in a ``.meta.json`` sidecar.

    CSV columns are ``run.columns``; missing entries are left empty and
    floats are written with enough digits to read back exactly.
    """
    path = Path(destination)
    header = {"schema_version": SCHEMA_VERSION, "command": run.command, "metadata": _json_value(run.metadata)}
    if fmt == "json":
        cols = run.columns
        doc = dict(header, columns=cols, records=[[_json_value(r.get(c)) for c in cols] for r in run.records])
        _dump(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
    elif fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = run.columns
        writer.writerow(cols)
        for rec in run.records:
            writer.writerow([_cell(rec.get(c)) for c in cols])
        _dump(path, buf.getvalue())
        _dump(_metadata_path(path), json.dumps(header, indent=1, sort_keys=True) + "\n")
    else:
        raise ValueError(f"unknown output format {fmt!r}")
    return path


def read_output(source) -> RunOutput:
    path = Path(source)
    try:
        if path.suffix == ".json":
            doc = json.loads(path.read_text(encoding="utf-8"))
            cols = doc["columns"]
            records = [dict(zip(cols, map(_from_json_value, row))) for row in doc["records"]]
        else:
            doc = json.loads(_metadata_path(path).read_text(encoding="utf-8"))
            with path.open(encoding="utf-8", newline="") as fh:
                reader = csv.reader(fh)
                cols = next(reader)
                records = [dict(zip(cols, map(_uncell, row))) for row in reader]
    except (OSError, KeyError, ValueError, StopIteration) as exc:
        raise ParseError(f"cannot read run output {path}: {exc}") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ParseError(f"{path}: unsupported schema version {doc.get('schema_version')}")
    return RunOutput(doc["command"], records, doc["metadata"])


def write_plot_data(rows: Sequence[dict], destination, columns: Sequence[str] = PLOT_COLUMNS) -> Path:
    """Plot-ready CSV; absent values (such as unobserved years) are left empty."""
    path = Path(destination)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    _dump(path, buf.getvalue())
    return path
