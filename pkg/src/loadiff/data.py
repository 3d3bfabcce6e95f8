"""Hourly load ingestion, min-max scaling and (previous day, day) windowing."""

from __future__ import annotations

import csv
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

HOURS = 24
_FALLBACK_FORMATS = ("%Y-%m-%d %H:%M", "%Y-%m-%d %H:%M:%S", "%m/%d/%Y %H:%M", "%d/%m/%Y %H:%M")


@dataclass(frozen=True)
class LoadRecord:
    timestamp: datetime
    load: float


@dataclass
class ColumnSpec:
    """How to read a delimited load file.

    ``hour_ending=True`` shifts every timestamp back one hour, so files that
    label the last hour of a day as 00:00 of the next day (or as 24:00 of the
    same day) group correctly.
    """

    timestamp: str = "timestamp"
    load: str = "load"
    delimiter: str = ","
    timestamp_format: str | None = None
    hour_ending: bool = False


@dataclass
class IngestReport:
    rows: int = 0
    out_of_order: int = 0
    missing_hours: int = 0
    gaps: list = field(default_factory=list)


_HOUR_24 = re.compile(r"(?<!\d)24:00(:00)?$")


def _parse_timestamp(text, fmt):
    text = text.strip()
    if _HOUR_24.search(text):
        # "24:00" is midnight at the end of the day; datetime only knows 00:00
        return _parse_timestamp(_HOUR_24.sub(lambda m: "00:00" + (m.group(1) or ""), text), fmt) + timedelta(days=1)
    if fmt:
        return datetime.strptime(text, fmt)
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        pass
    for candidate in _FALLBACK_FORMATS:
        try:
            return datetime.strptime(text, candidate)
        except ValueError:
            continue
    raise ValueError(f"unrecognised timestamp {text!r}")


def read_load_csv(path, columns: ColumnSpec | None = None):
    """Parse a delimited file into sorted records plus an :class:`IngestReport`."""
    columns = columns or ColumnSpec()
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    report = IngestReport()
    records = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=columns.delimiter)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        try:
            ts_col = header.index(columns.timestamp)
            load_col = header.index(columns.load)
        except ValueError:
            raise DataError(
                f"{path}: header {header} lacks columns {columns.timestamp!r}/{columns.load!r}"
            ) from None
        shift = timedelta(hours=1) if columns.hour_ending else timedelta(0)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                ts = _parse_timestamp(row[ts_col], columns.timestamp_format) - shift
                value = float(row[load_col])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: cannot parse row {row!r}: {exc}") from None
            if not math.isfinite(value):
                raise DataError(f"{path}:{lineno}: non-finite load {row[load_col]!r}")
            if records and ts < records[-1].timestamp:
                report.out_of_order += 1
            records.append(LoadRecord(ts, value))
    if not records:
        raise DataError(f"{path}: no data rows")
    report.rows = len(records)
    records.sort(key=lambda r: r.timestamp)
    for prev, cur in zip(records, records[1:]):
        if cur.timestamp == prev.timestamp:
            raise DataError(f"{path}: duplicate timestamp {cur.timestamp.isoformat()}")
        step = cur.timestamp - prev.timestamp
        if step != timedelta(hours=1):
            missing = int(step / timedelta(hours=1)) - 1
            report.missing_hours += max(missing, 0)
            report.gaps.append((prev.timestamp, cur.timestamp))
    if report.out_of_order:
        log.warning("%s: %d rows were out of order and have been sorted", path, report.out_of_order)
    if report.gaps:
        log.warning("%s: %d gaps, %d missing hours", path, len(report.gaps), report.missing_hours)
    return records, report


def ingest_csv(path, columns: ColumnSpec | None = None):
    return read_load_csv(path, columns)[0]


@dataclass(frozen=True)
class Normalizer:
    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise DataError(f"normalizer needs max > min, got min={self.min}, max={self.max}")

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.min) / (self.max - self.min)

    def denormalize(self, x):
        return np.asarray(x, dtype=np.float64) * (self.max - self.min) + self.min


def fit_normalizer(records, train_range=None) -> Normalizer:
    """Min-max over records whose calendar day lies in ``train_range`` (inclusive)."""
    if train_range is not None:
        lo, hi = train_range
        records = [r for r in records if lo <= r.timestamp.date() <= hi]
    if not records:
        raise DataError("training range contains no records")
    loads = np.array([r.load for r in records])
    lo_v, hi_v = float(loads.min()), float(loads.max())
    if hi_v == lo_v:
        raise DataError(f"load series is constant ({lo_v}); cannot normalise")
    return Normalizer(lo_v, hi_v)


@dataclass
class DaySample:
    condition: np.ndarray
    target: np.ndarray
    date: date


def complete_days(records):
    """Map date -> 24 hourly loads for days with every hour present."""
    by_day = defaultdict(dict)
    for r in records:
        by_day[r.timestamp.date()][r.timestamp.hour] = r.load
    days = {}
    dropped = []
    for day in sorted(by_day):
        hours = by_day[day]
        if len(hours) == HOURS:
            days[day] = np.array([hours[h] for h in range(HOURS)])
        else:
            dropped.append(day)
    if dropped:
        log.warning("dropped %d incomplete days: %s", len(dropped), ", ".join(map(str, dropped[:5])))
    return days, dropped


def make_day_pairs(records, normalizer: Normalizer | None = None):
    """One sample per pair of consecutive complete days ``(d - 1, d)``."""
    if len({r.timestamp.date() for r in records}) < 2:
        raise DataError("need at least two calendar days of data")
    days, _ = complete_days(records)
    scale = normalizer.normalize if normalizer is not None else np.asarray
    samples = []
    ordered = sorted(days)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur - prev == timedelta(days=1):
            samples.append(DaySample(scale(days[prev]), scale(days[cur]), cur))
    return samples


def split_index(n, ratio=0.8):
    return int(Fraction(str(ratio)) * n)


def train_test_split(samples, ratio=0.8):
    """Chronological split: the first ``floor(ratio * n)`` samples train."""
    if len(samples) < 5:
        raise DataError(f"need at least 5 samples to split, got {len(samples)}")
    k = split_index(len(samples), ratio)
    return samples[:k], samples[k:]


@dataclass
class Dataset:
    train: list
    test: list
    normalizer: Normalizer

    @staticmethod
    def stack(samples):
        if not samples:
            return np.empty((0, HOURS)), np.empty((0, HOURS))
        return (
            np.stack([s.condition for s in samples]),
            np.stack([s.target for s in samples]),
        )


def prepare_dataset(records, ratio=0.8, last_days: int | None = None) -> Dataset:
    """Window, split chronologically, then fit the scaler on training days only."""
    if last_days:
        cutoff = records[-1].timestamp.date() - timedelta(days=int(last_days) - 1)
        records = [r for r in records if r.timestamp.date() >= cutoff]
    raw = make_day_pairs(records)
    train_raw, _ = train_test_split(raw, ratio)
    first = train_raw[0].date - timedelta(days=1)
    last = train_raw[-1].date
    normalizer = fit_normalizer(records, (first, last))
    samples = make_day_pairs(records, normalizer)
    train, test = samples[: len(train_raw)], samples[len(train_raw) :]
    return Dataset(train, test, normalizer)


def synthetic_records(n_days=730, seed=0, start=datetime(2001, 1, 1), base=100.0, mean_amp=30.0,
                      phi=0.8, amp_noise=3.0, point_noise=1.5):
    """Toy load whose daily sinusoid amplitude follows an AR(1) in the previous day's amplitude."""
    rng = np.random.default_rng(seed)
    hours = np.arange(HOURS)
    shape = np.sin(2.0 * np.pi * (hours - 6) / HOURS)
    amp = mean_amp
    records = []
    for d in range(n_days):
        amp = mean_amp + phi * (amp - mean_amp) + amp_noise * rng.standard_normal()
        loads = base + amp * shape + point_noise * rng.standard_normal(HOURS)
        day0 = start + timedelta(days=d)
        records.extend(LoadRecord(day0 + timedelta(hours=int(h)), float(v)) for h, v in zip(hours, loads))
    return records


def write_load_csv(records, path, columns: ColumnSpec | None = None):
    columns = columns or ColumnSpec()
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter=columns.delimiter)
        writer.writerow([columns.timestamp, columns.load])
        for r in records:
            writer.writerow([r.timestamp.strftime("%Y-%m-%d %H:%M"), repr(float(r.load))])
