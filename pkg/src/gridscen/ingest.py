"""Asset metadata, hourly forecast/actual panels and calendar windows."""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

HOURS = 24
ASSET_COLUMNS = ["asset_id", "kind", "nominal_capacity_mw", "latitude", "longitude", "zone"]
SERIES_COLUMNS = ["asset_id", "date", "hour", "forecast_mwh", "actual_mwh"]
KINDS = ("solar", "wind")


class IngestError(ValueError):
    """Raised when an input file violates its schema."""


class CalibrationInfeasible(RuntimeError):
    """Raised when there is not enough data around a target date."""


@dataclass(frozen=True)
class AssetRecord:
    asset_id: str
    kind: str
    nominal_capacity: float
    latitude: float = 0.0
    longitude: float = 0.0
    zone: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise IngestError(f"asset {self.asset_id!r}: kind must be one of {KINDS}, got {self.kind!r}")
        cap = float(self.nominal_capacity)
        if not np.isfinite(cap) or cap <= 0:
            raise IngestError(f"asset {self.asset_id!r}: nominal capacity must be finite and positive")


@dataclass(frozen=True, eq=False)
class DailyPanel:
    """Day-by-hour forecast and actual MWh for a single asset.

    ``forecast`` and ``actual`` are ``(n_days, 24)`` arrays where missing
    cells hold NaN; ``missing`` flags any cell where either value is absent.
    """

    asset_id: str
    days: np.ndarray  # datetime64[D], strictly increasing
    forecast: np.ndarray
    actual: np.ndarray
    missing: np.ndarray = field(default=None)

    def __post_init__(self):
        days = np.asarray(self.days, dtype="datetime64[D]")
        fc = np.asarray(self.forecast, dtype=float)
        ac = np.asarray(self.actual, dtype=float)
        if fc.shape != ac.shape or fc.ndim != 2 or fc.shape[1] != HOURS:
            raise IngestError(f"panel {self.asset_id!r}: forecast/actual must both be (days, 24)")
        if fc.shape[0] != days.shape[0]:
            raise IngestError(f"panel {self.asset_id!r}: {days.shape[0]} days but {fc.shape[0]} rows")
        if days.size > 1 and np.any(np.diff(days).astype(int) <= 0):
            raise IngestError(f"panel {self.asset_id!r}: days must be strictly increasing")
        miss = ~(np.isfinite(fc) & np.isfinite(ac))
        if self.missing is not None:
            miss |= np.asarray(self.missing, dtype=bool)
        ok = ~miss
        if np.any(fc[ok] < 0) or np.any(ac[ok] < 0):
            raise IngestError(f"panel {self.asset_id!r}: negative MWh")
        for name, val in (("days", days), ("forecast", fc), ("actual", ac), ("missing", miss)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n_days(self) -> int:
        return int(self.days.shape[0])

    def day_index(self, day) -> int:
        d = np.datetime64(day, "D")
        i = int(np.searchsorted(self.days, d))
        if i >= self.n_days or self.days[i] != d:
            raise KeyError(f"{self.asset_id}: no data for {d}")
        return i

    def usable_days(self, max_missing_frac: float = 0.5) -> np.ndarray:
        """Boolean mask of days with at most ``max_missing_frac`` missing hours."""
        return self.missing.mean(axis=1) <= max_missing_frac


@dataclass(frozen=True)
class DayWindow:
    target_date: np.datetime64
    theta: float
    members: np.ndarray  # datetime64[D]

    def __len__(self):
        return int(self.members.shape[0])


def _as_day_array(dates) -> np.ndarray:
    return np.atleast_1d(np.asarray(dates, dtype="datetime64[D]"))


def year_fraction(date) -> np.ndarray | float:
    """Fraction of the calendar year elapsed at the start of ``date``.

    Accepts a single date or an array of dates. Leap years use 366 days.
    """
    scalar = np.ndim(date) == 0 and not isinstance(date, (list, tuple))
    try:
        days = _as_day_array(date)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"invalid date: {date!r}") from exc
    if np.any(np.isnat(days)):
        raise ValueError(f"invalid date: {date!r}")
    years = days.astype("datetime64[Y]")
    start = years.astype("datetime64[D]")
    length = ((years + 1).astype("datetime64[D]") - start).astype(float)
    phi = (days - start).astype(float) / length
    return float(phi[0]) if scalar else phi


def circular_distance(phi_a, phi_b) -> np.ndarray:
    delta = np.abs(np.asarray(phi_a, dtype=float) - np.asarray(phi_b, dtype=float)) % 1.0
    return np.minimum(delta, 1.0 - delta)


def build_window(target_date, theta: float, available_dates: Iterable) -> DayWindow:
    """All available dates within circular year-fraction distance ``theta``."""
    if not 0.0 < theta <= 0.5:
        raise ValueError(f"theta must lie in (0, 0.5], got {theta}")
    avail = np.unique(_as_day_array(list(available_dates) if not isinstance(available_dates, np.ndarray)
                                    else available_dates))
    if avail.size == 0:
        raise ValueError("no available dates")
    target = np.datetime64(target_date, "D")
    dist = circular_distance(year_fraction(avail), year_fraction(target))
    members = avail[dist <= theta + 1e-12]
    if members.size == 0:
        raise CalibrationInfeasible(f"no available dates within theta={theta} of {target}")
    return DayWindow(target_date=target, theta=float(theta), members=members)


# --------------------------------------------------------------------------- io


def _read_csv(path, columns: Sequence[str]) -> pd.DataFrame:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(df.columns) != list(columns):
        raise IngestError(f"{path}: expected header {','.join(columns)}, got {','.join(df.columns)}")
    return df


def load_assets(metadata_file) -> list[AssetRecord]:
    df = _read_csv(metadata_file, ASSET_COLUMNS)
    dup = df["asset_id"].duplicated()
    if dup.any():
        raise IngestError(f"{metadata_file}: duplicate asset_id {df['asset_id'][dup].iloc[0]!r}")
    records = []
    for lineno, row in enumerate(df.itertuples(index=False), start=2):
        try:
            records.append(AssetRecord(
                asset_id=row.asset_id, kind=row.kind.strip().lower(),
                nominal_capacity=float(row.nominal_capacity_mw),
                latitude=float(row.latitude or 0.0), longitude=float(row.longitude or 0.0),
                zone=row.zone))
        except ValueError as exc:
            raise IngestError(f"{metadata_file} line {lineno}: {exc}") from exc
    return records


def load_panels(metadata_file, series_files) -> tuple[list[AssetRecord], list[DailyPanel]]:
    """Read ``assets.csv`` and one or more ``series.csv`` files.

    Unparseable or blank values are kept as missing cells; negative values,
    duplicate (asset, date, hour) keys and unknown assets are hard errors.
    """
    assets = load_assets(metadata_file)
    known = {a.asset_id for a in assets}
    if isinstance(series_files, (str, Path)):
        series_files = [series_files]

    frames = []
    for path in series_files:
        df = _read_csv(path, SERIES_COLUMNS)
        df["_source"] = f"{path}"
        df["_line"] = np.arange(2, len(df) + 2)
        frames.append(df)
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=SERIES_COLUMNS)

    unknown = ~df["asset_id"].isin(known)
    if unknown.any():
        r = df[unknown].iloc[0]
        raise IngestError(f"{r['_source']} line {r['_line']}: unknown asset_id {r['asset_id']!r}")

    dates = pd.to_datetime(df["date"], format="%Y-%m-%d", errors="coerce")
    hours = pd.to_numeric(df["hour"], errors="coerce")
    bad_key = dates.isna() | hours.isna() | ~hours.between(1, HOURS) | (hours % 1 != 0)
    if bad_key.any():
        r = df[bad_key].iloc[0]
        raise IngestError(f"{r['_source']} line {r['_line']}: bad date/hour {r['date']!r}/{r['hour']!r}")
    df["_day"] = dates.values.astype("datetime64[D]")
    df["_hour"] = hours.astype(int)
    dup = df.duplicated(["asset_id", "_day", "_hour"])
    if dup.any():
        r = df[dup].iloc[0]
        raise IngestError(f"{r['_source']} line {r['_line']}: duplicate row for "
                          f"({r['asset_id']}, {r['date']}, {r['hour']})")

    values = {}
    n_unparseable = 0
    for col in ("forecast_mwh", "actual_mwh"):
        raw = df[col].str.strip()
        num = pd.to_numeric(raw, errors="coerce")
        n_unparseable += int((num.isna() & (raw != "")).sum())
        neg = num < 0
        if neg.any():
            r = df[neg].iloc[0]
            raise IngestError(f"{r['_source']} line {r['_line']}: negative {col} {r[col]!r}")
        values[col] = num.to_numpy(dtype=float)
    df["_f"] = values["forecast_mwh"]
    df["_a"] = values["actual_mwh"]

    panels = []
    n_missing = 0
    for rec in assets:
        sub = df[df["asset_id"] == rec.asset_id]
        if sub.empty:
            logger.warning("asset %s has no series rows", rec.asset_id)
            continue
        days = np.unique(sub["_day"].to_numpy(dtype="datetime64[D]"))
        row = np.searchsorted(days, sub["_day"].to_numpy(dtype="datetime64[D]"))
        col = sub["_hour"].to_numpy() - 1
        fc = np.full((days.size, HOURS), np.nan)
        ac = np.full((days.size, HOURS), np.nan)
        fc[row, col] = sub["_f"].to_numpy()
        ac[row, col] = sub["_a"].to_numpy()
        panel = DailyPanel(rec.asset_id, days, fc, ac)
        n_missing += int(panel.missing.sum())
        panels.append(panel)
    logger.info("loaded %d assets, %d panels, %d rows; %d missing cells (%d unparseable values)",
                len(assets), len(panels), len(df), n_missing, n_unparseable)
    return assets, panels


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_assets(assets: Sequence[AssetRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ASSET_COLUMNS)
        for a in assets:
            w.writerow([a.asset_id, a.kind, repr(float(a.nominal_capacity)),
                        repr(float(a.latitude)), repr(float(a.longitude)), a.zone])


def write_series(panels: Sequence[DailyPanel], path) -> None:
    """Serialize panels in the ``series.csv`` layout (blank = missing)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for p in panels:
            day_str = [str(d) for d in p.days]
            for i, ds in enumerate(day_str):
                for h in range(HOURS):
                    w.writerow([p.asset_id, ds, h + 1, _fmt(p.forecast[i, h]), _fmt(p.actual[i, h])])


def to_date(value) -> dt.date:
    return np.datetime64(value, "D").astype(dt.date)
