"""Map nearby-day data onto a target date and form production ratios."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .ingest import HOURS, DailyPanel, DayWindow, year_fraction
from .meta import MetaModel

HOUR_CENTERS = (np.arange(HOURS) + 0.5) / HOURS
AT_CAPACITY_TOL = 1e-9


class RescalingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class RatioPanel:
    """Production ratios for one asset around one target date.

    ``alpha``/``beta`` are ``(window_days, H)`` over ``active_hours``
    (0-based hour indices); ``hourly_max`` is the full 24-vector in MWh.
    """

    asset_id: str
    target_date: np.datetime64
    days: np.ndarray
    active_hours: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    hourly_max: np.ndarray
    daily_max: float
    boundaries: tuple
    missing: np.ndarray

    @property
    def n_hours(self) -> int:
        return int(self.active_hours.size)


def solar_active_hours(start: float, stop: float) -> np.ndarray:
    """Hours (0-based) whose interval intersects ``[start, stop]``, rounded outward."""
    first = int(math.floor(start * HOURS + 1e-9))
    last = int(math.ceil(stop * HOURS - 1e-9))
    return np.arange(max(first, 0), min(last, HOURS))


def dilate_profile(values, source_bounds, target_bounds, hours=None) -> np.ndarray:
    """Evaluate a source-day hourly profile at target hours after mapping the
    target's diurnal span affinely onto the source's.

    Points landing outside the day evaluate to 0; the profile is linearly
    interpolated between hour centres.
    """
    values = np.asarray(values, dtype=float)
    s_src, t_src = source_bounds
    s_tgt, t_tgt = target_bounds
    hours = np.arange(HOURS) if hours is None else np.asarray(hours)
    tau = HOUR_CENTERS[hours]
    u = (tau - s_tgt) / (t_tgt - s_tgt)
    src_time = s_src + u * (t_src - s_src)
    out = np.interp(src_time, HOUR_CENTERS, np.nan_to_num(values, nan=0.0))
    # propagate missing source hours that feed the interpolation
    pos = np.clip(src_time * HOURS - 0.5, 0, HOURS - 1)
    nan = np.isnan(values)
    out[nan[np.floor(pos).astype(int)] | nan[np.ceil(pos).astype(int)]] = np.nan
    out[(src_time < 0.0) | (src_time > 1.0)] = 0.0
    return out


def rescale_day(source_day, target_day, meta: MetaModel, panel: DailyPanel):
    """Rescaled ``(actual, forecast)`` 24-vectors of ``source_day`` as seen from ``target_day``.

    Solar: dilate the diurnal span and scale by the envelope ratio. Wind:
    scale each hour by the ratio of the mean surface (target over source),
    holding output at capacity and capping at capacity.
    """
    i = panel.day_index(source_day)
    g = panel.actual[i].copy()
    f = panel.forecast[i].copy()
    phi_src, phi_tgt = year_fraction([source_day, target_day])

    if meta.kind == "wind":
        surf = meta.surface([phi_src, phi_tgt])
        ratio = surf[1] / surf[0]
        cap = meta.nominal_capacity
        out = []
        for x in (g, f):
            at_cap = x >= cap * (1 - AT_CAPACITY_TOL)
            y = np.minimum(x * ratio, cap)
            y[at_cap] = cap
            out.append(y)
        return out[0], out[1]

    if np.datetime64(source_day, "D") == np.datetime64(target_day, "D"):
        return g, f
    gmax = meta.daily_max([phi_src, phi_tgt])
    ratio = gmax[1] / gmax[0]
    s, t = meta.boundaries([phi_src, phi_tgt])
    src_b, tgt_b = (s[0], t[0]), (s[1], t[1])
    active = solar_active_hours(*tgt_b)
    out = []
    for x in (g, f):
        y = np.zeros(HOURS)
        y[active] = ratio * dilate_profile(x, src_b, tgt_b, active)
        out.append(y)
    return out[0], out[1]


def hourly_max(rescaled_actuals) -> np.ndarray:
    """Per-hour maximum over window days (NaN cells ignored)."""
    arr = np.asarray(rescaled_actuals, dtype=float)
    if arr.shape[0] == 0:
        raise ValueError("empty window")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = np.nanmax(arr, axis=0)
    return np.nan_to_num(out, nan=0.0)


def make_ratios(window: DayWindow, meta: MetaModel, panel: DailyPanel,
                max_missing_frac: float = 0.5) -> RatioPanel:
    target = window.target_date
    phi_t = year_fraction(target)
    usable = set(panel.days[panel.usable_days(max_missing_frac)])
    days = [d for d in window.members if d in usable]
    if not days:
        raise RescalingError(f"{panel.asset_id}: no usable days in window around {target}")

    pairs = [rescale_day(d, target, meta, panel) for d in days]
    G = np.vstack([g for g, _ in pairs])
    F = np.vstack([f for _, f in pairs])
    M = np.isnan(G) | np.isnan(F)
    G[M] = np.nan
    F[M] = np.nan

    if meta.kind == "solar":
        s, t = meta.boundaries(phi_t)
        bounds = (float(s[0]), float(t[0]))
        active = solar_active_hours(*bounds)
    else:
        bounds = (0.0, 1.0)
        active = np.arange(HOURS)

    hmax = np.zeros(HOURS)
    hmax[active] = hourly_max(G[:, active])
    bad = active[hmax[active] <= 0]
    if bad.size:
        if meta.kind == "solar":
            # outward rounding can admit an hour that never produced in the window
            active = active[hmax[active] > 0]
            hmax[bad] = 0.0
        else:
            raise RescalingError(f"{panel.asset_id}: zero hourly max at hours {[int(h) + 1 for h in bad]}")
    if active.size == 0:
        raise RescalingError(f"{panel.asset_id}: no active hours around {target}")

    denom = hmax[active]
    alpha = np.clip(G[:, active] / denom, 0.0, 1.0)
    beta = np.clip(F[:, active] / denom, 0.0, 1.0)
    return RatioPanel(
        asset_id=panel.asset_id, target_date=target, days=np.asarray(days, dtype="datetime64[D]"),
        active_hours=active, alpha=alpha, beta=beta, hourly_max=hmax,
        daily_max=float(meta.daily_max(phi_t)[0]), boundaries=bounds, missing=M[:, active])
