"""``gridscen`` command line.

Stages run in order (metacalibrate, calibrate, cluster, simulate, assess);
each reads the previous stage's files from ``output_dir`` and refuses
stale or corrupted ones unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, substream
from .ingest import IngestError, write_assets, write_series
from .pipeline import (StageError, Workspace, stage_assess, stage_calibrate, stage_cluster, stage_metacalibrate,
                       stage_simulate)
from .storage import StorageError
from .synth import SynthConfig, synthesize_truth

logger = logging.getLogger("gridscen")

EXIT_STAGE = 1
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3


def _dates(args) -> list[np.datetime64]:
    start = np.datetime64(args.date, "D")
    end = np.datetime64(args.end, "D") if args.end else start
    if end < start:
        raise ConfigError("--end precedes --date")
    return list(np.arange(start, end + 1))


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.jobs is not None:
        cfg.jobs = args.jobs
    cfg.validate()
    return cfg


def cmd_metacalibrate(args, cfg):
    for p in stage_metacalibrate(Workspace(cfg, args.force)):
        print(p)


def cmd_calibrate(args, cfg):
    ws = Workspace(cfg, args.force)
    failed = {}
    for d in _dates(args):
        try:
            for p in stage_calibrate(ws, d):
                print(p)
        except StageError as exc:
            failed.update({f"{k}@{d}": v for k, v in exc.failures.items()})
            logger.error("%s", exc)
    if failed:
        raise StageError(f"{len(failed)} asset-date calibration(s) failed", failed)


def cmd_cluster(args, cfg):
    ws = Workspace(cfg, args.force)
    for d in _dates(args):
        print(stage_cluster(ws, d))


def cmd_simulate(args, cfg):
    ws = Workspace(cfg, args.force)
    if args.binary:
        cfg.binary_output = True
    for d in _dates(args):
        print(stage_simulate(ws, d, args.n))


def cmd_assess(args, cfg):
    for p in stage_assess(Workspace(cfg, args.force), args.start, args.end):
        print(p)


def cmd_synth(args, cfg):
    kinds = tuple(k.strip() for k in args.kinds.split(","))
    scfg = SynthConfig(n_assets=args.assets, kinds=kinds, n_days=args.days, start=args.start)
    assets, panels, truth = synthesize_truth(scfg, substream(cfg.seed, "synth"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_assets(assets, out / "assets.csv")
    write_series(panels, out / "series.csv")
    record = {
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in scfg.to_dict().items()},
        "mu_coef": truth.mu_coef.tolist(), "log_sigma_coef": truth.log_sigma_coef.tolist(),
        "mu_beta": truth.mu_beta, "sigma_beta": truth.sigma_beta, "blocks": truth.blocks.tolist(),
        "p_zero": truth.p_zero, "p_max": truth.p_max,
    }
    (out / "truth.json").write_text(json.dumps(record, indent=1) + "\n")
    run = RunConfig(metadata_file="assets.csv", series_files=["series.csv"], output_dir="out", seed=cfg.seed)
    run.dump(out / "config.yaml")
    for name in ("assets.csv", "series.csv", "truth.json", "config.yaml"):
        print(out / name)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridscen", description="Probabilistic wind and solar scenario pipeline.")
    ap.add_argument("--config", help="flat YAML or JSON file with RunConfig keys")
    ap.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    ap.add_argument("--jobs", type=int, help="maximum parallel worker processes")
    ap.add_argument("--force", action="store_true", help="accept stale upstream artifacts")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("metacalibrate", help="fit seasonal envelopes and boundaries per asset")

    def dated(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--date", required=True, help="target date YYYY-MM-DD")
        p.add_argument("--end", help="last target date of an inclusive range")
        return p

    dated("calibrate", "per-asset deviation model and deviates for a target date")
    dated("cluster", "factor models, hierarchy and correlations for a target date")
    p = dated("simulate", "draw scenarios for a target date")
    p.add_argument("-n", type=int, default=None, help="number of scenarios (default from config)")
    p.add_argument("--binary", action="store_true", help="also write the float32 scenario file")

    p = sub.add_parser("assess", help="score scenarios against actuals over a date range")
    p.add_argument("--start", required=True)
    p.add_argument("--end", required=True)

    p = sub.add_parser("synth", help="write a synthetic fleet with known generating law")
    p.add_argument("--out", required=True, help="directory for assets.csv, series.csv, truth.json, config.yaml")
    p.add_argument("--assets", type=int, default=6)
    p.add_argument("--days", type=int, default=730)
    p.add_argument("--kinds", default="wind", help="comma-separated kinds cycled over assets")
    p.add_argument("--start", default="2021-01-01")
    return ap


COMMANDS = {
    "metacalibrate": cmd_metacalibrate, "calibrate": cmd_calibrate, "cluster": cmd_cluster,
    "simulate": cmd_simulate, "assess": cmd_assess, "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, IngestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StorageError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for k, v in sorted(exc.failures.items()):
            print(f"  {k}: {v}", file=sys.stderr)
        return EXIT_STAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
