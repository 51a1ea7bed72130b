"""Seasonal structure per asset: max-production envelope, diurnal
boundaries (solar) and the hourly mean generation surface (wind)."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.optimize import linprog

from .ingest import HOURS, AssetRecord, DailyPanel, year_fraction

CAP_SLACK = 0.05
ENVELOPE_FLOOR = 0.01
SURFACE_FLOOR = 1e-3


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FourierCurve:
    """``c0 + sum_k a_k cos(2 pi k phi) + b_k sin(2 pi k phi)``."""

    constant: float
    cos: tuple = ()
    sin: tuple = ()

    def __post_init__(self):
        if len(self.cos) != len(self.sin):
            raise ValueError("cos and sin coefficient lists differ in length")
        coeffs = np.r_[self.constant, self.cos, self.sin]
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("non-finite Fourier coefficient")

    @property
    def modes(self) -> int:
        return len(self.cos)

    @classmethod
    def from_vector(cls, vec) -> "FourierCurve":
        vec = np.asarray(vec, dtype=float)
        k = (vec.size - 1) // 2
        return cls(float(vec[0]), tuple(vec[1:1 + k]), tuple(vec[1 + k:]))

    def vector(self) -> np.ndarray:
        return np.r_[self.constant, self.cos, self.sin]

    def __call__(self, phi):
        return fourier_basis(phi, self.modes) @ self.vector()

    def to_dict(self) -> dict:
        return {"constant": self.constant, "cos": list(self.cos), "sin": list(self.sin)}

    @classmethod
    def from_dict(cls, d) -> "FourierCurve":
        return cls(float(d["constant"]), tuple(map(float, d["cos"])), tuple(map(float, d["sin"])))


def fourier_basis(phi, modes: int) -> np.ndarray:
    """Design matrix ``[1, cos(2 pi k phi)..., sin(2 pi k phi)...]``."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    k = np.arange(1, modes + 1)
    ang = 2.0 * np.pi * phi[:, None] * k[None, :]
    return np.hstack([np.ones((phi.size, 1)), np.cos(ang), np.sin(ang)])


def _asymmetric_lp(phi, target, modes: int, over: float, under: float, max_weight: float = 0.0):
    """Solve ``min sum[over * (f - y)^+ + under * (y - f)^+] + max_weight * max(f - y)``
    over Fourier coefficients of ``f`` as a linear program."""
    X = fourier_basis(phi, modes)
    n, p = X.shape
    # variables: coef (free, p) | pos (n) | neg (n) | m (free, 1)
    c = np.r_[np.zeros(p), np.full(n, over), np.full(n, under), max_weight]
    eye = np.eye(n)
    A_eq = np.hstack([X, -eye, eye, np.zeros((n, 1))])
    b_eq = np.asarray(target, dtype=float)
    bounds = [(None, None)] * p + [(0, None)] * (2 * n) + [(None, None)]
    A_ub = b_ub = None
    if max_weight > 0:
        # f_d - y_d <= m
        A_ub = np.hstack([X, np.zeros((n, 2 * n)), -np.ones((n, 1))])
        b_ub = b_eq.copy()
    else:
        bounds[-1] = (0, 0)
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        raise FitError(f"asymmetric Fourier fit did not converge: {res.message}")
    return FourierCurve.from_vector(res.x[:p])


def asymmetric_loss(curve: FourierCurve, phi, target, over, under, max_weight=0.0) -> float:
    r = curve(phi) - np.asarray(target, dtype=float)
    return float(np.sum(over * np.maximum(r, 0) + under * np.maximum(-r, 0)) + max_weight * r.max())


def _check_sample(phi, modes):
    if modes < 1:
        raise ValueError("need at least one Fourier mode")
    if np.size(phi) < 4 * modes + 2:
        raise FitError(f"need at least {4 * modes + 2} observations for {modes} modes, got {np.size(phi)}")


def fit_max_envelope(phi, daily_max, modes: int = 6, kappa_under: float = 20.0,
                     kappa_max: float = 0.5) -> FourierCurve:
    """Seasonal ceiling on daily maximum production.

    Days where the observed maximum exceeds the curve cost ``kappa_under``
    per MWh, days below cost 1, plus ``kappa_max`` times the largest
    over-coverage.
    """
    phi = np.asarray(phi, dtype=float)
    daily_max = np.asarray(daily_max, dtype=float)
    _check_sample(phi, modes)
    if kappa_under <= 1 or kappa_max < 0:
        raise ValueError("require kappa_under > 1 and kappa_max >= 0")
    if not np.any(daily_max > 0):
        raise FitError("all daily maxima are zero")
    return _asymmetric_lp(phi, daily_max, modes, 1.0, kappa_under, kappa_max)


def fit_boundary(phi, observed, modes: int = 3, kappa: float = 20.0, side: str = "stop") -> FourierCurve:
    """Fit a diurnal production boundary (day fractions).

    The stop boundary is pushed at-or-after the observed last production,
    the start boundary at-or-before the first.
    """
    phi = np.asarray(phi, dtype=float)
    observed = np.asarray(observed, dtype=float)
    _check_sample(phi, modes)
    if np.any((observed <= 0) | (observed >= 1)):
        raise FitError("boundary observations must lie strictly inside (0, 1)")
    if side == "stop":
        return _asymmetric_lp(phi, observed, modes, 1.0, kappa)
    if side == "start":
        return _asymmetric_lp(phi, observed, modes, kappa, 1.0)
    raise ValueError(f"side must be 'start' or 'stop', got {side!r}")


def fit_wind_surface(phi, actual, modes: int = 2) -> list[FourierCurve]:
    """Least-squares Fourier fit of actual generation per hour of day.

    ``actual`` is ``(days, 24)`` with NaN for missing cells.
    """
    phi = np.asarray(phi, dtype=float)
    actual = np.asarray(actual, dtype=float)
    curves = []
    for h in range(actual.shape[1]):
        ok = np.isfinite(actual[:, h])
        if not ok.any():
            raise FitError(f"hour {h + 1} has no data")
        X = fourier_basis(phi[ok], modes)
        coef, *_ = np.linalg.lstsq(X, actual[ok, h], rcond=None)
        curves.append(FourierCurve.from_vector(coef))
    return curves


def observed_boundaries(actual: np.ndarray, eps: float = 0.0):
    """First/last productive hour per day as day fractions (NaN if dark all day)."""
    prod = np.nan_to_num(actual, nan=0.0) > eps
    any_prod = prod.any(axis=1)
    first = np.argmax(prod, axis=1)
    last = HOURS - 1 - np.argmax(prod[:, ::-1], axis=1)
    start = np.where(any_prod, first / HOURS, np.nan)
    stop = np.where(any_prod, (last + 1) / HOURS, np.nan)
    return start, stop


@dataclass(frozen=True)
class MetaModel:
    asset_id: str
    kind: str
    nominal_capacity: float
    max_envelope: FourierCurve | None = None
    start_boundary: FourierCurve | None = None
    stop_boundary: FourierCurve | None = None
    wind_surface: tuple = field(default=())

    def daily_max(self, phi):
        """Envelope g^max_d clipped to [1% G_nom, (1 + 5%) G_nom]."""
        cap = self.nominal_capacity
        if self.max_envelope is None:
            return np.full(np.shape(np.atleast_1d(phi)), cap)
        return np.clip(self.max_envelope(phi), ENVELOPE_FLOOR * cap, (1 + CAP_SLACK) * cap)

    def boundaries(self, phi):
        phi = np.atleast_1d(phi)
        if self.kind != "solar":
            return np.zeros(phi.shape), np.ones(phi.shape)
        return np.clip(self.start_boundary(phi), 0.0, 1.0), np.clip(self.stop_boundary(phi), 0.0, 1.0)

    def surface(self, phi) -> np.ndarray:
        """``(len(phi), 24)`` hourly mean generation, floored to stay positive."""
        phi = np.atleast_1d(phi)
        vals = fourier_basis(phi, self.wind_surface[0].modes) @ self._surface_coefs
        return np.maximum(vals, SURFACE_FLOOR * self.nominal_capacity)

    @cached_property
    def _surface_coefs(self) -> np.ndarray:
        return np.column_stack([c.vector() for c in self.wind_surface])

    def to_dict(self) -> dict:
        out = {"asset_id": self.asset_id, "kind": self.kind, "nominal_capacity": self.nominal_capacity}
        for name in ("max_envelope", "start_boundary", "stop_boundary"):
            curve = getattr(self, name)
            out[name] = None if curve is None else curve.to_dict()
        out["wind_surface"] = [c.to_dict() for c in self.wind_surface]
        return out

    @classmethod
    def from_dict(cls, d) -> "MetaModel":
        get = lambda k: None if d.get(k) is None else FourierCurve.from_dict(d[k])  # noqa: E731
        return cls(asset_id=d["asset_id"], kind=d["kind"], nominal_capacity=float(d["nominal_capacity"]),
                   max_envelope=get("max_envelope"), start_boundary=get("start_boundary"),
                   stop_boundary=get("stop_boundary"),
                   wind_surface=tuple(FourierCurve.from_dict(c) for c in d.get("wind_surface", [])))


def fit_meta(asset: AssetRecord, panel: DailyPanel, envelope_modes: int = 6, boundary_modes: int = 3,
             kappa_m1: float = 20.0, kappa_m2: float = 0.5, kappa_d: float = 20.0,
             wind_modes: int = 2, max_missing_frac: float = 0.5) -> MetaModel:
    keep = panel.usable_days(max_missing_frac)
    phi = year_fraction(panel.days[keep])
    actual = np.where(panel.missing[keep], np.nan, panel.actual[keep])

    if asset.kind == "wind":
        surface = fit_wind_surface(phi, actual, wind_modes)
        return MetaModel(asset.asset_id, "wind", asset.nominal_capacity, wind_surface=tuple(surface))

    daily = np.nanmax(np.where(np.isnan(actual), -np.inf, actual), axis=1)
    sunny = daily > 0
    envelope = fit_max_envelope(phi[sunny], daily[sunny], envelope_modes, kappa_m1, kappa_m2)
    start, stop = observed_boundaries(actual[sunny])
    start_curve = fit_boundary(phi[sunny], np.clip(start, 1e-6, 1 - 1e-6), boundary_modes, kappa_d, "start")
    stop_curve = fit_boundary(phi[sunny], np.clip(stop, 1e-6, 1 - 1e-6), boundary_modes, kappa_d, "stop")
    meta = MetaModel(asset.asset_id, "solar", asset.nominal_capacity, envelope, start_curve, stop_curve)
    grid = np.arange(366) / 366.0
    s, t = meta.boundaries(grid)
    if np.any(s >= t):
        raise FitError(f"{asset.asset_id}: fitted diurnal boundaries cross")
    return meta
