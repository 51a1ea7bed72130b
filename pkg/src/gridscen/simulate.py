"""Joint scenario simulation: top-level draw, conditional propagation down
the cluster hierarchy, hour-space reconstruction and inversion to MWh."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtri

from .calibration import AssetCalibration
from .correlation import CorrelationBundle
from .factors import AssetFactors
from .ingest import HOURS, AssetRecord

logger = logging.getLogger(__name__)


def psd_sqrt(cov) -> np.ndarray:
    """Symmetric square root factor ``R`` with ``R R^T = cov`` (negative modes dropped)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    return v * np.sqrt(np.clip(w, 0.0, None))


def conditional_gaussian(cov, known, values):
    """Moments of the unknown coordinates of ``N(0, cov)`` given the known ones.

    ``values`` may be a vector or an ``(N, len(known))`` batch; the returned
    mean then has a matching leading dimension. A singular known block is
    handled through its pseudo-inverse.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = cov.shape[0]
    known = np.asarray(known, dtype=int).ravel()
    values = np.asarray(values, dtype=float)
    if values.shape[-1:] != known.shape and not (known.size == 0 and values.size == 0):
        raise ValueError(f"{known.size} known indices but values have shape {values.shape}")
    if np.any((known < 0) | (known >= n)) or np.unique(known).size != known.size:
        raise ValueError("invalid known index set")
    unknown = np.setdiff1d(np.arange(n), known)
    if known.size == 0:
        lead = values.shape[:-1] if values.ndim > 1 else ()
        return np.zeros(lead + (n,)), cov.copy()
    S_kk = cov[np.ix_(known, known)]
    S_uk = cov[np.ix_(unknown, known)]
    P = np.linalg.pinv(S_kk, hermitian=True)
    B = S_uk @ P
    mean = values @ B.T
    cond = cov[np.ix_(unknown, unknown)] - B @ S_uk.T
    return mean, 0.5 * (cond + cond.T)


# ----------------------------------------------------------------- randomness


def stage_key(name: str) -> int:
    return zlib.crc32(name.encode())


def scenario_normals(seed: int, stage: str, n_scenarios: int, dim: int, start: int = 0) -> np.ndarray:
    """``(n_scenarios, dim)`` standard normals; row ``i`` depends only on
    ``(seed, stage, start + i)`` so any scenario can be regenerated alone."""
    out = np.empty((n_scenarios, dim))
    key = stage_key(stage)
    for i in range(n_scenarios):
        ss = np.random.SeedSequence(seed, spawn_key=(key, start + i))
        out[i] = np.random.Generator(np.random.Philox(ss)).standard_normal(dim)
    return out


class _Stream:
    """Hands out consecutive column blocks of a pre-drawn normal matrix."""

    def __init__(self, normals: np.ndarray):
        self.normals = normals
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = self.normals[:, self.pos:self.pos + k]
        if out.shape[1] != k:
            raise RuntimeError("normal stream exhausted")
        self.pos += k
        return out


def normals_needed(bundle: CorrelationBundle, factors: Mapping[str, AssetFactors]) -> int:
    """Columns of standard normals consumed by ``simulate_deviates``."""
    n = sum(len(c) for c in bundle.top.columns)
    for h in bundle.hierarchies:
        for part in h.levels[2:]:
            for children in part.clusters:
                for child in children:
                    cc = bundle.clusters[(h.kind, part.level - 1, child)]
                    n += bundle.k_keep * (len(cc.members) - len(cc.subset))
    for f in factors.values():
        n += f.n_factors - min(bundle.k_keep, f.n_factors)
    return n


def simulate_deviates(bundle: CorrelationBundle, factors: Mapping[str, AssetFactors], normals) -> dict:
    """Per-asset simulated normal-score deviates ``(N, H_a)``.

    ``normals`` is an ``(N, normals_needed(...))`` matrix of independent
    standard normals. Propagated amplitudes are handled in standardized
    units and rescaled by each asset's ``sqrt(lambda_k)``; factors beyond
    ``k_keep`` are drawn independently with their own variances.
    """
    stream = _Stream(np.asarray(normals, dtype=float))
    N = stream.normals.shape[0]
    K = bundle.k_keep
    u = {a: np.zeros((N, K)) for a in factors}

    for k, (cols, block) in enumerate(zip(bundle.top.columns, bundle.top.blocks)):
        x = stream.take(len(cols)) @ psd_sqrt(block).T
        sd = np.sqrt(np.clip(np.diag(block), 0.0, None))
        x = x / np.where(sd > 0, sd, 1.0)
        for j, a in enumerate(cols):
            u[a][:, k] = x[:, j]

    for h in bundle.hierarchies:
        for part in reversed(h.levels[2:]):
            for children in part.clusters:
                for child in children:
                    cc = bundle.clusters[(h.kind, part.level - 1, child)]
                    known = [cc.members.index(a) for a in cc.subset]
                    unknown = [i for i in range(len(cc.members)) if i not in known]
                    if not unknown:
                        continue
                    for k in range(K):
                        vals = np.column_stack([u[cc.members[i]][:, k] for i in known])
                        mean, cov = conditional_gaussian(cc.A[k], known, vals)
                        draw = mean + stream.take(len(unknown)) @ psd_sqrt(cov).T
                        for j, i in enumerate(unknown):
                            u[cc.members[i]][:, k] = draw[:, j]

    out = {}
    for a in sorted(factors):
        f = factors[a]
        kk = min(K, f.n_factors)
        gamma = np.empty((N, f.n_factors))
        gamma[:, :kk] = u[a][:, :kk]
        gamma[:, kk:] = stream.take(f.n_factors - kk)
        gamma *= np.sqrt(f.eigenvalues)
        out[a] = gamma @ f.psi.T
    return out


# ------------------------------------------------------------------ inversion


def invert_copula(z_tilde, knots) -> np.ndarray:
    """Map normal scores back to residual space through the empirical
    per-hour quantile function; beyond the outer knots slope 1 is used."""
    z_tilde = np.asarray(z_tilde, dtype=float)
    knots = np.asarray(knots, dtype=float)
    n = knots.shape[0]
    xk = ndtri(np.arange(1, n + 1) / (n + 1.0))
    out = np.empty_like(z_tilde)
    for h in range(knots.shape[1]):
        x = z_tilde[..., h]
        y = np.interp(x, xk, knots[:, h])
        y = np.where(x < xk[0], knots[0, h] + (x - xk[0]), y)
        y = np.where(x > xk[-1], knots[-1, h] + (x - xk[-1]), y)
        out[..., h] = y
    return out


def forecast_ratio(calib: AssetCalibration, forecast_mwh) -> np.ndarray:
    """Target-day forecast as a ratio of the hourly maximum on active hours."""
    f = np.asarray(forecast_mwh, dtype=float)[calib.active_hours]
    if np.any(~np.isfinite(f)):
        raise ValueError(f"{calib.asset_id}: target-day forecast has missing hours")
    scale = calib.hourly_max[calib.active_hours]
    beta = f / scale
    if np.any(beta > 1 + 1e-9):
        logger.warning("%s: forecast exceeds hourly maximum at %d hours; clipped",
                       calib.asset_id, int(np.sum(beta > 1 + 1e-9)))
    return np.clip(beta, 0.0, 1.0)


def invert_to_mwh(z, calib: AssetCalibration, forecast_mwh, copula: bool = True) -> np.ndarray:
    """``(N, 24)`` MWh from simulated deviates over the active hours.

    ``z`` is in normal-score units when ``copula`` is set (the default) and
    in residual units otherwise.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    resid = invert_copula(z, calib.knots) if copula else z
    beta = forecast_ratio(calib, forecast_mwh)
    ratio = np.clip(beta + calib.model.mu(beta) + calib.model.sigma(beta) * resid, 0.0, 1.0)
    out = np.zeros((z.shape[0], HOURS))
    out[:, calib.active_hours] = ratio * calib.hourly_max[calib.active_hours]
    return out


@dataclass(frozen=True, eq=False)
class ScenarioSet:
    target_date: np.datetime64
    asset_ids: tuple
    values: np.ndarray  # (N, J, 24) MWh
    seed: int = 0
    provenance: dict = field(default_factory=dict)

    @property
    def n_scenarios(self) -> int:
        return int(self.values.shape[0])

    def asset(self, asset_id: str) -> np.ndarray:
        return self.values[:, self.asset_ids.index(asset_id), :]

    def to_frame(self) -> pd.DataFrame:
        N, J, H = self.values.shape
        idx = np.indices((N, J, H)).reshape(3, -1)
        return pd.DataFrame({"scenario": idx[0], "asset_id": np.asarray(self.asset_ids)[idx[1]],
                             "hour": idx[2] + 1, "mwh": self.values.ravel()})

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6f", lineterminator="\n")

    @classmethod
    def read_csv(cls, path, target_date=None) -> "ScenarioSet":
        df = pd.read_csv(path, dtype={"asset_id": str})
        ids = tuple(pd.unique(df["asset_id"]))
        N = int(df["scenario"].max()) + 1
        vals = np.zeros((N, len(ids), HOURS))
        pos = {a: i for i, a in enumerate(ids)}
        vals[df["scenario"].to_numpy(), df["asset_id"].map(pos).to_numpy(), df["hour"].to_numpy() - 1] = df["mwh"]
        return cls(np.datetime64(target_date, "D") if target_date else np.datetime64("NaT"), ids, vals)

    def write_binary(self, path) -> None:
        """Row-major ``N x J x 24`` float32 with a ``.json`` sidecar."""
        self.values.astype("<f4").tofile(path)
        sidecar = {"dtype": "float32-le", "order": ["scenario", "asset", "hour"],
                   "shape": list(self.values.shape), "asset_ids": list(self.asset_ids),
                   "target_date": str(self.target_date), "seed": self.seed}
        with open(f"{path}.json", "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)

    @classmethod
    def read_binary(cls, path) -> "ScenarioSet":
        with open(f"{path}.json") as fh:
            meta = json.load(fh)
        vals = np.fromfile(path, dtype="<f4").reshape(meta["shape"]).astype(float)
        return cls(np.datetime64(meta["target_date"], "D"), tuple(meta["asset_ids"]), vals, meta.get("seed", 0))


def simulate_scenarios(bundle: CorrelationBundle, factors: Mapping[str, AssetFactors],
                       calibrations: Mapping[str, AssetCalibration], forecasts: Mapping[str, np.ndarray],
                       n_scenarios: int, seed: int, stage: str = "simulate", target_date=None) -> ScenarioSet:
    ids = tuple(sorted(calibrations))
    dim = normals_needed(bundle, factors)
    normals = scenario_normals(seed, stage, n_scenarios, dim)
    z = simulate_deviates(bundle, factors, normals)
    values = np.stack([invert_to_mwh(z[a], calibrations[a], forecasts[a]) for a in ids], axis=1)
    td = target_date if target_date is not None else calibrations[ids[0]].target_date
    return ScenarioSet(np.datetime64(td, "D"), ids, values, seed)


# ---------------------------------------------------------------- aggregation

GROUPINGS = ("asset", "zone", "system", "kind")


def aggregate(scenarios: ScenarioSet, assets: Sequence[AssetRecord] | Mapping[str, AssetRecord],
              grouping: str = "system", daily: bool = False) -> dict:
    """Per-scenario sums over group members, keyed by group label.

    Values are ``(N, 24)`` or ``(N,)`` when ``daily`` is set.
    """
    if grouping not in GROUPINGS:
        raise ValueError(f"grouping must be one of {GROUPINGS}")
    recs = assets if isinstance(assets, Mapping) else {a.asset_id: a for a in assets}
    groups: dict[str, list[int]] = {}
    for j, a in enumerate(scenarios.asset_ids):
        if a not in recs:
            raise KeyError(f"no asset record for {a!r}")
        rec = recs[a]
        if grouping == "zone" and not rec.zone:
            raise KeyError(f"asset {a!r} has no zone")
        label = {"asset": a, "zone": rec.zone, "system": "system", "kind": rec.kind}[grouping]
        groups.setdefault(label, []).append(j)
    out = {}
    for label in sorted(groups):
        s = scenarios.values[:, groups[label], :].sum(axis=1)
        out[label] = s.sum(axis=1) if daily else s
    return out
