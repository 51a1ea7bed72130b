"""Stage orchestration, in memory and on disk.

The in-memory functions (``fit_all_meta``, ``calibrate_date``,
``cluster_date``, ``simulate_date``) are what the file-based stages and
the experiments share; the ``stage_*`` functions add artifact IO with
digest checks.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .assess import score_days
from .calibration import AssetCalibration, calibrate_ratios
from .clustering import Hierarchy, build_hierarchy
from .config import RunConfig, substream
from .correlation import Amplitudes, CorrelationBundle, build_correlations
from .factors import AssetFactors, fit_factors
from .ingest import AssetRecord, CalibrationInfeasible, DailyPanel, build_window, load_panels
from .meta import MetaModel, fit_meta
from .rescaling import make_ratios
from .simulate import ScenarioSet, aggregate, simulate_scenarios
from .storage import (ChecksumError, MissingArtifactError, StaleInputError, file_digest, read_artifact,
                      write_artifact)

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A stage finished with per-asset failures (listed in ``failures``)."""

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or {}


# ------------------------------------------------------------------ in memory


def fit_all_meta(assets: Sequence[AssetRecord], panels: Mapping[str, DailyPanel], cfg: RunConfig) -> dict:
    out, failures = {}, {}
    for a in assets:
        if a.asset_id not in panels:
            failures[a.asset_id] = "no series data"
            continue
        try:
            out[a.asset_id] = fit_meta(a, panels[a.asset_id], cfg.envelope_modes, cfg.boundary_modes, cfg.kappa_m1,
                                       cfg.kappa_m2, cfg.kappa_d, cfg.wind_modes, cfg.max_missing_frac)
        except Exception as exc:  # noqa: BLE001 - reported per asset
            failures[a.asset_id] = f"{type(exc).__name__}: {exc}"
    if failures:
        raise StageError("meta-calibration failed for " + ", ".join(f"{k} ({v})" for k, v in sorted(failures.items())),
                         failures)
    return out


def window_for(date, panel: DailyPanel, cfg: RunConfig, exclude: Iterable = ()):
    """Calibration window around ``date`` excluding the target day itself
    (and any dates in ``exclude``); with ``history_only`` only earlier days."""
    date = np.datetime64(date, "D")
    skip = np.unique(np.r_[np.asarray(list(exclude), dtype="datetime64[D]"), date])
    avail = panel.days[~np.isin(panel.days, skip)]
    if cfg.history_only:
        avail = avail[avail < date]
    if avail.size == 0:
        raise CalibrationInfeasible(f"{panel.asset_id}: no data available for a window around {date}")
    return build_window(date, cfg.theta, avail)


def _calibrate_one(args):
    asset, panel, meta, date, cfg, exclude = args
    window = window_for(date, panel, cfg, exclude)
    ratios = make_ratios(window, meta, panel, cfg.max_missing_frac)
    rng = substream(cfg.seed, "calibrate", asset.asset_id, str(date))
    return calibrate_ratios(ratios, rng, objective=cfg.objective, restarts=cfg.fit_restarts,
                            n_impute=cfg.n_impute, kind=asset.kind)


def _run(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        out = []
        for it in items:
            try:
                out.append(fn(it))
            except Exception as exc:  # noqa: BLE001 - collected per item
                out.append(exc)
        return out
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, it) for it in items]
        out = []
        for f in futures:
            try:
                out.append(f.result())
            except Exception as exc:  # noqa: BLE001
                out.append(exc)
        return out


def calibrate_date(date, assets: Sequence[AssetRecord], panels: Mapping[str, DailyPanel],
                   metas: Mapping[str, MetaModel], cfg: RunConfig, exclude: Iterable = ()):
    """Per-asset calibrations for ``date``. Returns ``(calibrations, failures)``."""
    date = np.datetime64(date, "D")
    exclude = list(exclude)
    items = [(a, panels[a.asset_id], metas[a.asset_id], date, cfg, exclude) for a in assets]
    calibs, failures = {}, {}
    for a, res in zip(assets, _run(_calibrate_one, items, cfg.jobs)):
        if isinstance(res, Exception):
            failures[a.asset_id] = f"{type(res).__name__}: {res}"
            logger.error("calibration of %s for %s failed: %s", a.asset_id, date, res)
        else:
            calibs[a.asset_id] = res
    return calibs, failures


def asset_factors(calibs: Mapping[str, AssetCalibration]) -> dict[str, AssetFactors]:
    return {a: fit_factors(c.z_tilde, a, c.active_hours, c.days) for a, c in calibs.items()}


def amplitudes_of(factors: Mapping[str, AssetFactors]) -> dict[str, Amplitudes]:
    return {a: Amplitudes(a, np.asarray(f.days, dtype="datetime64[D]"), f.gamma, f.eigenvalues)
            for a, f in factors.items()}


def _common_gamma1(amps: Mapping[str, Amplitudes], ids: Sequence[str]) -> dict[str, np.ndarray]:
    common = None
    for a in ids:
        common = amps[a].days if common is None else np.intersect1d(common, amps[a].days)
    return {a: amps[a].gamma[np.searchsorted(amps[a].days, common), 0] for a in ids}


def build_hierarchies(calibs: Mapping[str, AssetCalibration], amps: Mapping[str, Amplitudes], cfg: RunConfig,
                      rng) -> list[Hierarchy]:
    out = []
    for kind in ("solar", "wind"):
        ids = sorted(a for a, c in calibs.items() if c.kind == kind)
        if not ids:
            continue
        out.append(build_hierarchy(_common_gamma1(amps, ids), kind, cfg.target_reduction, cfg.top_cardinality,
                                   cfg.anneal, rng))
    return out


def cluster_date(calibs: Mapping[str, AssetCalibration], cfg: RunConfig, date=None,
                 hierarchies: Sequence[Hierarchy] | None = None):
    """Factors, hierarchies and correlations. Returns ``(factors, bundle)``."""
    factors = asset_factors(calibs)
    amps = amplitudes_of(factors)
    if hierarchies is None:
        rng = substream(cfg.seed, "cluster", str(date))
        hierarchies = build_hierarchies(calibs, amps, cfg, rng)
    else:
        known = {m for h in hierarchies for m in h.levels[0].delegates}
        if known != set(calibs):
            raise StageError("frozen hierarchy does not cover the calibrated assets")
    bundle = build_correlations(hierarchies, amps, cfg.k_keep, cfg.p)
    return factors, bundle


def day_values(panels: Mapping[str, DailyPanel], date, which: str = "forecast") -> dict[str, np.ndarray]:
    out = {}
    for a, p in panels.items():
        try:
            i = p.day_index(date)
        except KeyError:
            continue
        out[a] = np.asarray(getattr(p, which)[i], dtype=float)
    return out


def simulate_date(date, calibs: Mapping[str, AssetCalibration], factors, bundle: CorrelationBundle,
                  forecasts: Mapping[str, np.ndarray], cfg: RunConfig, n_scenarios: int | None = None) -> ScenarioSet:
    missing = sorted(set(calibs) - set(forecasts))
    if missing:
        raise StageError(f"no forecast on {date} for {', '.join(missing)}")
    return simulate_scenarios(bundle, factors, calibs, forecasts, n_scenarios or cfg.n_scenarios, int(cfg.seed),
                              f"simulate/{np.datetime64(date, 'D')}", date)


# -------------------------------------------------------------------- on disk


@dataclass
class Workspace:
    cfg: RunConfig
    force: bool = False

    @property
    def root(self) -> Path:
        return Path(self.cfg.output_dir)

    def meta_path(self, asset_id) -> Path:
        return self.root / "meta" / f"{asset_id}.json"

    def calib_path(self, asset_id, date) -> Path:
        return self.root / "calib" / asset_id / f"{np.datetime64(date, 'D')}.json"

    def clusters_path(self, date) -> Path:
        return self.root / "clusters" / f"{np.datetime64(date, 'D')}.json"

    def frozen_path(self) -> Path:
        return self.root / "clusters" / "frozen_hierarchy.json"

    def scenarios_path(self, date) -> Path:
        return self.root / f"scenarios_{np.datetime64(date, 'D')}.csv"

    def data_inputs(self) -> dict[str, str]:
        paths = [("metadata", self.cfg.metadata_file)] + [(f"series:{Path(p).name}", p) for p in self.cfg.series_files]
        out = {}
        for name, p in paths:
            if not Path(p).exists():
                raise MissingArtifactError(f"input file {p} not found")
            out[name] = file_digest(p)
        return out

    def load_data(self):
        assets, panels = load_panels(self.cfg.metadata_file, self.cfg.series_files)
        return assets, {p.asset_id: p for p in panels}


def stage_metacalibrate(ws: Workspace) -> list[Path]:
    inputs = ws.data_inputs()
    assets, panels = ws.load_data()
    metas = fit_all_meta(assets, panels, ws.cfg)
    paths = []
    for a in assets:
        path = ws.meta_path(a.asset_id)
        write_artifact(path, "meta", metas[a.asset_id].to_dict(), inputs)
        paths.append(path)
    logger.info("wrote %d meta files", len(paths))
    return paths


def _load_metas(ws: Workspace, assets, inputs):
    metas = {}
    for a in assets:
        payload = read_artifact(ws.meta_path(a.asset_id), "meta", inputs, ws.force)
        metas[a.asset_id] = MetaModel.from_dict(payload)
    return metas


def stage_calibrate(ws: Workspace, date) -> list[Path]:
    date = np.datetime64(date, "D")
    inputs = ws.data_inputs()
    assets, panels = ws.load_data()
    metas = _load_metas(ws, assets, inputs)
    calibs, failures = calibrate_date(date, assets, panels, metas, ws.cfg)
    paths = []
    for a in assets:
        if a.asset_id not in calibs:
            continue
        deps = dict(inputs, meta=file_digest(ws.meta_path(a.asset_id)))
        path = ws.calib_path(a.asset_id, date)
        write_artifact(path, "calibration", calibs[a.asset_id].to_dict(), deps)
        paths.append(path)
    if failures:
        raise StageError(f"calibration failed for {len(failures)} asset(s): "
                         + "; ".join(f"{k}: {v}" for k, v in sorted(failures.items())), failures)
    return paths


def _load_calibs(ws: Workspace, assets, date, inputs) -> tuple[dict, dict]:
    calibs, digests = {}, {}
    for a in assets:
        path = ws.calib_path(a.asset_id, date)
        deps = dict(inputs, meta=file_digest(ws.meta_path(a.asset_id))) if ws.meta_path(a.asset_id).exists() else None
        payload = read_artifact(path, "calibration", deps, ws.force)
        calibs[a.asset_id] = AssetCalibration.from_dict(payload)
        digests[f"calib:{a.asset_id}"] = file_digest(path)
    return calibs, digests


def write_hierarchy_csv(bundle: CorrelationBundle, nodes_path, edges_path) -> None:
    with open(nodes_path, "w", newline="") as fn, open(edges_path, "w", newline="") as fe:
        wn = csv.writer(fn, lineterminator="\n")
        we = csv.writer(fe, lineterminator="\n")
        wn.writerow(["kind", "level", "node_id", "n_members"])
        we.writerow(["kind", "level", "parent_id", "child_id"])
        for h in bundle.hierarchies:
            for part in h.levels:
                for members, d in zip(part.clusters, part.delegates):
                    wn.writerow([h.kind, part.level, d, len(members)])
                    if part.level > 1:
                        for m in members:
                            we.writerow([h.kind, part.level, d, m])


def stage_cluster(ws: Workspace, date) -> Path:
    date = np.datetime64(date, "D")
    inputs = ws.data_inputs()
    assets, _ = ws.load_data()
    calibs, digests = _load_calibs(ws, assets, date, inputs)
    hierarchies = None
    if ws.cfg.clustering_mode == "frozen" and ws.frozen_path().exists():
        payload = read_artifact(ws.frozen_path(), "hierarchy")
        hierarchies = [Hierarchy.from_dict(h) for h in payload["hierarchies"]]
    factors, bundle = cluster_date(calibs, ws.cfg, date, hierarchies)
    if ws.cfg.clustering_mode == "frozen" and hierarchies is None:
        write_artifact(ws.frozen_path(), "hierarchy",
                       {"built_for": str(date), "hierarchies": [h.to_dict() for h in bundle.hierarchies]}, digests)
    path = ws.clusters_path(date)
    write_artifact(path, "clusters", {"date": str(date), **bundle.to_dict()}, digests)
    write_hierarchy_csv(bundle, path.with_name(f"{date}_nodes.csv"), path.with_name(f"{date}_edges.csv"))
    return path


def stage_simulate(ws: Workspace, date, n_scenarios: int | None = None) -> Path:
    date = np.datetime64(date, "D")
    inputs = ws.data_inputs()
    assets, panels = ws.load_data()
    calibs, digests = _load_calibs(ws, assets, date, inputs)
    cpath = ws.clusters_path(date)
    payload = read_artifact(cpath, "clusters", digests, ws.force)
    bundle = CorrelationBundle.from_dict(payload)
    factors = asset_factors(calibs)
    scen = simulate_date(date, calibs, factors, bundle, day_values(panels, date, "forecast"), ws.cfg, n_scenarios)
    out = ws.scenarios_path(date)
    out.parent.mkdir(parents=True, exist_ok=True)
    scen.write_csv(out)
    extra = {}
    if ws.cfg.binary_output:
        bin_path = out.with_suffix(".f32")
        scen.write_binary(bin_path)
        extra["binary_digest"] = file_digest(bin_path)
    write_artifact(out.with_suffix(".json"), "scenarios",
                   {"date": str(date), "n_scenarios": scen.n_scenarios, "seed": int(ws.cfg.seed),
                    "asset_ids": list(scen.asset_ids), "csv_digest": file_digest(out), **extra},
                   dict(digests, clusters=file_digest(cpath)))
    return out


def load_scenarios(ws: Workspace, date) -> ScenarioSet:
    path = ws.scenarios_path(date)
    meta = read_artifact(path.with_suffix(".json"), "scenarios")
    if not path.exists():
        raise MissingArtifactError(f"missing scenario file {path}")
    if file_digest(path) != meta["csv_digest"]:
        raise ChecksumError(f"{path}: content does not match its recorded digest")
    return ScenarioSet.read_csv(path, date)


def stage_assess(ws: Workspace, start, end) -> list[Path]:
    start, end = np.datetime64(start, "D"), np.datetime64(end, "D")
    if end < start:
        raise ValueError("date range end precedes start")
    assets, panels = ws.load_data()
    dates = np.arange(start, end + 1)
    missing = [str(d) for d in dates if not ws.scenarios_path(d).exists()]
    if missing:
        raise MissingArtifactError("no scenarios for " + ", ".join(missing))
    scen = [load_scenarios(ws, d) for d in dates]
    recs = {a.asset_id: a for a in assets}
    paths = []
    for gran in ws.cfg.granularities:
        sg, ag = [], []
        for d, s in zip(dates, scen):
            sg.append(aggregate(s, recs, gran))
            acts = day_values(panels, d, "actual")
            ag.append(_aggregate_actuals(acts, recs, gran, s.asset_ids))
        rng = substream(ws.cfg.seed, "assess", gran, str(start), str(end))
        report = score_days(dates, sg, ag, gran, rng, ws.cfg.q_lo, ws.cfg.q_hi)
        rp = ws.root / f"report_{start}_{end}_{gran}.csv"
        hp = ws.root / f"pit_hist_{start}_{end}_{gran}.csv"
        report.write(rp, hp)
        paths += [rp, hp]
    return paths


def _aggregate_actuals(acts, recs, grouping, ids) -> dict:
    out: dict[str, np.ndarray] = {}
    for a in ids:
        if a not in acts:
            continue
        rec = recs[a]
        label = {"asset": a, "zone": rec.zone, "system": "system", "kind": rec.kind}[grouping]
        out[label] = out.get(label, 0.0) + acts[a]
    return out


__all__ = [
    "StageError", "Workspace", "calibrate_date", "cluster_date", "fit_all_meta", "simulate_date", "window_for",
    "stage_metacalibrate", "stage_calibrate", "stage_cluster", "stage_simulate", "stage_assess",
    "StaleInputError", "ChecksumError", "MissingArtifactError", "day_values",
]
