"""Verification of scenario ensembles against realized actuals."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.spatial.distance import pdist

from .synth import SynthConfig, Truth, synthesize_truth  # noqa: F401  (testbed lives beside the scores)


def pit(samples, actual, rng=None, v=None):
    """Randomized probability integral transform.

    ``(#{x < g} + V (1 + #{x = g})) / (N + 1)`` with ``V ~ U(0, 1)``; the
    randomization spreads ties (point masses) uniformly. ``samples`` may be
    ``(N,)`` or ``(T, N)`` with ``actual`` of shape ``(T,)``.
    """
    x = np.asarray(samples, dtype=float)
    g = np.asarray(actual, dtype=float)
    if x.shape[-1] < 2:
        raise ValueError("need at least 2 scenarios")
    if v is None:
        v = np.random.default_rng(rng).random(g.shape)
    g_ = g[..., None]
    below = np.sum(x < g_, axis=-1)
    ties = np.sum(x == g_, axis=-1)
    return (below + v * (1 + ties)) / (x.shape[-1] + 1)


def ensemble_quantile(samples, q):
    """Quantile at plotting position ``rank / (N + 1)``, linear between order
    statistics and clamped to the sample range."""
    x = np.sort(np.asarray(samples, dtype=float), axis=-1)
    N = x.shape[-1]
    pos = np.clip(np.asarray(q, dtype=float) * (N + 1) - 1.0, 0.0, N - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, N - 1)
    w = pos - lo
    return x[..., lo] * (1 - w) + x[..., hi] * w


def coverage(samples, actuals, q_lo: float = 0.1, q_hi: float = 0.9) -> tuple[int, int]:
    """Counts of actuals below the ``q_lo`` and above the ``q_hi`` ensemble quantile.

    ``samples`` is ``(T, N)``, ``actuals`` ``(T,)``.
    """
    x = np.atleast_2d(samples)
    g = np.atleast_1d(np.asarray(actuals, dtype=float))
    lo = ensemble_quantile(x, q_lo)
    hi = ensemble_quantile(x, q_hi)
    return int(np.sum(g < lo)), int(np.sum(g > hi))


def _spread(sorted_x):
    """``sum_{i,j} |x_i - x_j|`` from sorted samples along the last axis.

    Summing gaps keeps a degenerate ensemble at exactly zero.
    """
    N = sorted_x.shape[-1]
    k = np.arange(1, N)
    return 2.0 * np.sum(np.diff(sorted_x, axis=-1) * (k * (N - k)), axis=-1)


def _mean_abs(d):
    """Mean along the last axis, exact when all entries are equal."""
    d0 = d.min(axis=-1, keepdims=True)
    return d0[..., 0] + np.mean(d - d0, axis=-1)


def crps(samples, actual, fair: bool = False):
    """Ensemble CRPS ``mean|x - g| - spread``.

    By default the spread is ``sum|x_i - x_j| / (2 N^2)``, which equals the
    integral of ``(F_N(y) - 1{y >= g})^2`` for the empirical CDF ``F_N``;
    ``fair=True`` divides by ``2 N (N - 1)`` instead.
    """
    x = np.asarray(samples, dtype=float)
    g = np.asarray(actual, dtype=float)
    N = x.shape[-1]
    if N < 2:
        raise ValueError("need at least 2 scenarios")
    first = _mean_abs(np.abs(x - g[..., None]))
    denom = 2.0 * N * (N - 1) if fair else 2.0 * N * N
    return first - _spread(np.sort(x, axis=-1)) / denom


def energy_score(samples, actual, fair: bool = False) -> float:
    """Multivariate analogue of :func:`crps` with Euclidean distances.

    ``samples`` is ``(N, m)``, ``actual`` ``(m,)``.
    """
    X = np.asarray(samples, dtype=float)
    G = np.asarray(actual, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    G = np.atleast_1d(G)
    if X.shape[1] != G.shape[0]:
        raise ValueError(f"dimension mismatch: samples have {X.shape[1]}, actual {G.shape[0]}")
    N = X.shape[0]
    if N < 2:
        raise ValueError("need at least 2 scenarios")
    first = float(_mean_abs(np.linalg.norm(X - G, axis=1)))
    pair_sum = 2.0 * pdist(X).sum()
    denom = 2.0 * N * (N - 1) if fair else 2.0 * N * N
    return float(first - pair_sum / denom)


# -------------------------------------------------------------------- reports


@dataclass
class UnitScores:
    """Accumulated scores for one unit (asset, zone or system)."""

    pit: list = field(default_factory=list)
    lower: int = 0
    upper: int = 0
    instants: int = 0
    crps: list = field(default_factory=list)
    es: list = field(default_factory=list)

    def add_day(self, scen, actual, rng, q_lo=0.1, q_hi=0.9, hours=None):
        """``scen`` is ``(N, 24)``, ``actual`` ``(24,)``. Hour-wise instants
        are those in ``hours`` (default: all with a finite actual)."""
        actual = np.asarray(actual, dtype=float)
        ok = np.isfinite(actual)
        if hours is not None:
            mask = np.zeros(actual.size, bool)
            mask[np.asarray(hours)] = True
            ok &= mask
        if not ok.any():
            return
        x = scen[:, ok].T
        g = actual[ok]
        self.pit.extend(pit(x, g, rng).tolist())
        lo, hi = coverage(x, g, q_lo, q_hi)
        self.lower += lo
        self.upper += hi
        self.instants += int(ok.sum())
        self.crps.extend(np.atleast_1d(crps(x, g)).tolist())
        if np.all(np.isfinite(actual)):
            self.es.append(energy_score(scen, actual))


@dataclass
class ScoreReport:
    granularity: str
    period: tuple
    units: dict

    def rows(self) -> list[tuple[str, str, float]]:
        out = []
        for name in sorted(self.units):
            u = self.units[name]
            p = np.asarray(u.pit)
            ks = stats.kstest(p, "uniform") if p.size else None
            n = max(u.instants, 1)
            out += [
                (name, "instants", u.instants),
                (name, "pit_mean", float(p.mean()) if p.size else float("nan")),
                (name, "pit_ks_stat", float(ks.statistic) if ks else float("nan")),
                (name, "pit_ks_pvalue", float(ks.pvalue) if ks else float("nan")),
                (name, "lower_tail_count", u.lower),
                (name, "upper_tail_count", u.upper),
                (name, "lower_tail_freq", u.lower / n),
                (name, "upper_tail_freq", u.upper / n),
                (name, "crps_mean", float(np.mean(u.crps)) if u.crps else float("nan")),
                (name, "energy_score_mean", float(np.mean(u.es)) if u.es else float("nan")),
            ]
        return out

    def histogram(self, bins: int = 10) -> list[tuple[str, float, float, int]]:
        edges = np.linspace(0.0, 1.0, bins + 1)
        out = []
        for name in sorted(self.units):
            counts, _ = np.histogram(self.units[name].pit, bins=edges)
            out += [(name, float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]
        return out

    def write(self, report_path, histogram_path=None, bins: int = 10) -> None:
        with open(report_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit", "metric", "value"])
            for unit, metric, value in self.rows():
                w.writerow([unit, metric, repr(value) if isinstance(value, float) else value])
        if histogram_path is not None:
            with open(histogram_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["unit", "bin_lo", "bin_hi", "count"])
                w.writerows(self.histogram(bins))


def score_days(days, scenario_groups, actual_groups, granularity: str, rng=None,
               q_lo: float = 0.1, q_hi: float = 0.9, hours=None) -> ScoreReport:
    """Build a report from per-day grouped scenarios and actuals.

    ``scenario_groups[i]`` maps unit -> ``(N, 24)`` and ``actual_groups[i]``
    unit -> ``(24,)`` for day ``days[i]``.
    """
    rng = np.random.default_rng(rng)
    units: dict[str, UnitScores] = {}
    for scen, act in zip(scenario_groups, actual_groups):
        for name in sorted(scen):
            if name not in act:
                continue
            units.setdefault(name, UnitScores()).add_day(scen[name], act[name], rng, q_lo, q_hi, hours)
    days = [str(d) for d in days]
    return ScoreReport(granularity, (days[0], days[-1]) if days else ("", ""), units)
