"""Event-log ingestion, grid rasterization, chronological splits and synthetic data."""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import ZinbParams, zinb_sample
from .errors import DataError
from .graph import GridSpec
from .seeding import substream

KM_PER_DEGREE = math.pi * 6371.0088 / 180.0
VALIDATION_DAYS = 30
TRAIN_TEST_RATIO = 7


@dataclass(frozen=True)
class EventRecord:
    day: dt.date
    latitude: float
    longitude: float
    category: str


@dataclass(frozen=True)
class EventSchema:
    timestamp_col: str = "date"
    lat_col: str = "latitude"
    lon_col: str = "longitude"
    category_col: str = "category"
    categories: tuple | None = None
    strict: bool = True
    delimiter: str = ","


@dataclass
class EventLog:
    records: list
    categories: tuple
    malformed: list = field(default_factory=list)  # (line number, reason)


def load_events(path, schema=EventSchema()):
    """Parse a delimited event file.

    Rows that fail to parse are collected in ``EventLog.malformed`` with
    their line number.  Unknown category labels count as malformed in strict
    mode and are relabeled ``"other"`` otherwise.
    """
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    vocab = list(schema.categories) if schema.categories else None
    records, malformed = [], []
    with handle:
        reader = csv.DictReader(handle, delimiter=schema.delimiter)
        try:
            header = reader.fieldnames
        except (csv.Error, UnicodeDecodeError) as exc:
            raise DataError(f"unparseable event file {path}: {exc}") from exc
        if header is None:
            raise DataError(f"{path} has no header row")
        required = [schema.timestamp_col, schema.lat_col, schema.lon_col, schema.category_col]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path} is missing columns {missing}")
        try:
            for row in reader:
                line = reader.line_num
                try:
                    day = dt.date.fromisoformat(row[schema.timestamp_col].strip()[:10])
                    lat = float(row[schema.lat_col])
                    lon = float(row[schema.lon_col])
                    label = row[schema.category_col].strip()
                except (TypeError, ValueError, AttributeError) as exc:
                    malformed.append((line, f"parse error: {exc}"))
                    continue
                if not (math.isfinite(lat) and math.isfinite(lon)):
                    malformed.append((line, "non-finite coordinate"))
                    continue
                if vocab is not None and label not in vocab:
                    if schema.strict:
                        malformed.append((line, f"unknown category {label!r}"))
                        continue
                    label = "other"
                records.append(EventRecord(day, lat, lon, label))
        except (csv.Error, UnicodeDecodeError) as exc:
            raise DataError(f"unparseable event file {path}: {exc}") from exc
    if vocab is None:
        vocab = sorted({r.category for r in records})
    elif not schema.strict and any(r.category == "other" for r in records) and "other" not in vocab:
        vocab.append("other")
    return EventLog(records, tuple(vocab), malformed)


@dataclass
class CountTensor:
    counts: np.ndarray  # (N, T, C) non-negative integers
    grid: GridSpec
    start: dt.date
    categories: tuple

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 3:
            raise DataError("counts must be (regions, days, categories)")
        if self.counts.shape[0] != self.grid.n_regions:
            raise DataError(f"{self.counts.shape[0]} regions but grid has {self.grid.n_regions}")
        if self.counts.shape[2] != len(self.categories):
            raise DataError("category vocabulary does not match the count tensor")
        if np.any(self.counts < 0):
            raise DataError("counts must be non-negative")

    @property
    def n_days(self):
        return self.counts.shape[1]


def project(lat, lon, grid):
    """Local equirectangular projection to km east/north of the grid origin."""
    lat0, lon0 = grid.origin
    north = (lat - lat0) * KM_PER_DEGREE
    east = (lon - lon0) * KM_PER_DEGREE * math.cos(math.radians(lat0))
    return east, north


def locate(lat, lon, grid):
    """Region index of a point, or None outside the grid (cells are half-open)."""
    east, north = project(lat, lon, grid)
    col = math.floor(east / grid.cell_km)
    row = math.floor(north / grid.cell_km)
    if 0 <= row < grid.rows and 0 <= col < grid.cols:
        return grid.region(row, col)
    return None


@dataclass
class RasterReport:
    in_bounds: int = 0
    out_of_grid: int = 0
    out_of_span: int = 0
    unknown_category: int = 0

    @property
    def discarded(self):
        return self.out_of_grid + self.out_of_span + self.unknown_category


def rasterize(events, grid, start, days, categories):
    """Tally events into a ``(N, days, C)`` tensor starting at ``start``.

    Returns ``(CountTensor, RasterReport)``; every discarded event is counted
    in the report under the reason it was dropped.
    """
    index = {name: c for c, name in enumerate(categories)}
    counts = np.zeros((grid.n_regions, days, len(categories)), dtype=np.int64)
    report = RasterReport()
    for ev in events:
        t = (ev.day - start).days
        if not 0 <= t < days:
            report.out_of_span += 1
            continue
        c = index.get(ev.category)
        if c is None:
            report.unknown_category += 1
            continue
        region = locate(ev.latitude, ev.longitude, grid)
        if region is None:
            report.out_of_grid += 1
            continue
        counts[region, t, c] += 1
        report.in_bounds += 1
    return CountTensor(counts, grid, start, tuple(categories)), report


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitSpec:
    """Half-open day ranges; validation is the tail of the training range."""

    n_days: int
    train: tuple
    val: tuple
    test: tuple


def chrono_split(n_days, window=None, horizon=None, val_days=VALIDATION_DAYS):
    """Train:test = 7:1 along time; validation = last ``val_days`` of train.

    ``n_days`` may be a CountTensor.  When ``window`` and ``horizon`` are
    given the span must hold at least ``8 * (window + horizon)`` days and the
    training part must leave room for windows ahead of validation.
    """
    if isinstance(n_days, CountTensor):
        n_days = n_days.n_days
    n_test = n_days // (TRAIN_TEST_RATIO + 1)
    train_end = n_days - n_test
    val_start = train_end - val_days
    if window is not None:
        need = (TRAIN_TEST_RATIO + 1) * (window + (horizon or 1))
        if n_days < need:
            raise DataError(f"span of {n_days} days is too short; need at least {need}")
        if val_start < window + (horizon or 1):
            raise DataError("training span leaves no windows ahead of validation")
    if n_test < 1 or val_start < 0:
        raise DataError(f"span of {n_days} days is too short to split")
    return SplitSpec(n_days, (0, train_end), (val_start, train_end), (train_end, n_days))


# ---------------------------------------------------------------------------
# Statistics


@dataclass
class DatasetStats:
    categories: tuple
    totals: tuple
    zero_rates: tuple
    n_regions: int
    n_days: int
    start: dt.date

    @property
    def end(self):
        return self.start + dt.timedelta(days=self.n_days - 1)

    def to_text(self):
        lines = [
            f"regions {self.n_regions}",
            f"days {self.n_days} ({self.start.isoformat()} to {self.end.isoformat()})",
            f"{'category':<16} {'count':>10} {'zero_rate':>10}",
        ]
        for name, total, rate in zip(self.categories, self.totals, self.zero_rates):
            lines.append(f"{name:<16} {total:>10d} {rate:>10.4f}")
        return "\n".join(lines) + "\n"


def dataset_stats(tensor):
    counts = tensor.counts
    totals = tuple(int(v) for v in counts.sum(axis=(0, 1)))
    zero_rates = tuple(float(v) for v in (counts == 0).mean(axis=(0, 1)))
    return DatasetStats(tensor.categories, totals, zero_rates, counts.shape[0], counts.shape[1], tensor.start)


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SynthConfig:
    """Smooth radial ZINB fields over a grid: values move linearly from the
    grid center to the farthest corner."""

    rows: int = 8
    cols: int = 8
    days: int = 1000
    categories: int = 2
    start: dt.date = dt.date(2020, 1, 1)
    cell_km: float = 3.0
    pi_center: float = 0.3
    pi_edge: float = 0.8
    p_center: float = 0.6
    p_edge: float = 0.4
    r_center: float = 2.0
    r_edge: float = 1.0

    def __post_init__(self):
        if min(self.rows, self.cols, self.days, self.categories) < 1:
            raise ValueError("synthetic sizes must be positive")
        for name in ("pi", "p"):
            for end in ("center", "edge"):
                if not 0 < getattr(self, f"{name}_{end}") < 1:
                    raise ValueError(f"{name}_{end} must lie in (0, 1)")
        if min(self.r_center, self.r_edge) <= 0:
            raise ValueError("r must be positive")


def radial_distance(rows, cols):
    """Per-region distance from the grid center, scaled to 1 at the corners."""
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    d = np.hypot(rr - (rows - 1) / 2.0, cc - (cols - 1) / 2.0).ravel()
    return d / d.max() if d.max() > 0 else d


def radial_fields(config):
    d = radial_distance(config.rows, config.cols)[:, None]
    ones = np.ones((1, config.categories))

    def field_(center, edge):
        return (center + (edge - center) * d) * ones

    return ZinbParams(
        field_(config.pi_center, config.pi_edge),
        field_(config.p_center, config.p_edge),
        field_(config.r_center, config.r_edge),
    )


def synthesize(config, seed):
    """Draw every (region, day, category) cell from its ground-truth ZINB.

    Returns ``(CountTensor, ZinbParams)`` where each truth field is ``(N, C)``.
    """
    truth = radial_fields(config)
    rng = substream(seed, "synth")
    shape = (config.rows * config.cols, config.days, config.categories)
    cell = ZinbParams(*(np.broadcast_to(v[:, None, :], shape) for v in truth))
    counts = zinb_sample(cell, rng)
    grid = GridSpec(config.rows, config.cols, config.cell_km)
    names = tuple(f"cat{c}" for c in range(config.categories))
    return CountTensor(counts, grid, config.start, names), truth


# ---------------------------------------------------------------------------
# Tensor file


def _format_float(x):
    return repr(float(x))


def write_tensor(tensor, path):
    """Header, then one line per (region, day) holding C counts; regions are
    separated by a blank line."""
    g = tensor.grid
    if any("," in c or c != c.strip() or not c for c in tensor.categories):
        raise DataError("category names must be non-empty and free of commas")
    lines = [
        "# stmgnn count tensor v1",
        f"rows {g.rows}",
        f"cols {g.cols}",
        f"cell_km {_format_float(g.cell_km)}",
        f"origin {_format_float(g.origin[0])} {_format_float(g.origin[1])}",
        f"start {tensor.start.isoformat()}",
        f"days {tensor.n_days}",
        f"categories {','.join(tensor.categories)}",
        "counts",
    ]
    body = []
    for region in tensor.counts:
        body.append("\n".join(" ".join(str(v) for v in day) for day in region))
    text = "\n".join(lines) + "\n" + "\n\n".join(body) + "\n"
    Path(path).write_text(text)


def read_tensor(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    head, sep, body = text.partition("\ncounts\n")
    if not sep:
        raise DataError(f"{path} is not a count tensor file")
    meta = {}
    for line in head.splitlines():
        if line.startswith("#") or not line.strip():
            continue
        key, _, value = line.partition(" ")
        meta[key] = value
    try:
        lat, lon = (float(v) for v in meta["origin"].split())
        grid = GridSpec(int(meta["rows"]), int(meta["cols"]), float(meta["cell_km"]), (lat, lon))
        start = dt.date.fromisoformat(meta["start"])
        days = int(meta["days"])
        categories = tuple(meta["categories"].split(","))
        values = np.array(body.split(), dtype=np.int64)
        counts = values.reshape(grid.n_regions, days, len(categories))
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed count tensor {path}: {exc}") from exc
    return CountTensor(counts, grid, start, categories)
