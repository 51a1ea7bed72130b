"""Run configuration and seeded random substreams."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .clustering import AnnealParams


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Flat pipeline configuration; file keys mirror these field names."""

    metadata_file: str = "assets.csv"
    series_files: list = field(default_factory=lambda: ["series.csv"])
    output_dir: str = "out"
    # windows and meta-calibration
    theta: float = 0.15
    envelope_modes: int = 6
    boundary_modes: int = 3
    wind_modes: int = 2
    kappa_m1: float = 20.0
    kappa_m2: float = 0.5
    kappa_d: float = 20.0
    max_missing_frac: float = 0.5
    # conditional calibration
    objective: str = "censored"
    fit_restarts: int = 5
    n_impute: int = 2000
    history_only: bool = False
    # clustering
    temp0: float = 1.0
    eta: float = 0.999
    steps_per_node2: int = 50
    sa_restarts: int = 4
    target_reduction: float = 0.3
    top_cardinality: int = 3
    max_cluster_size: int = 8
    clustering_mode: str = "per-date"
    # correlation and simulation
    k_keep: int = 2
    p: int = 2
    n_scenarios: int = 1000
    binary_output: bool = False
    # assessment
    q_lo: float = 0.1
    q_hi: float = 0.9
    granularities: list = field(default_factory=lambda: ["asset", "zone", "system"])
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (0 < self.theta <= 0.5, "theta must lie in (0, 0.5]"),
            (self.envelope_modes >= 1 and self.boundary_modes >= 1 and self.wind_modes >= 0,
             "Fourier mode counts must be >= 1 (wind_modes >= 0)"),
            (self.kappa_m1 > 1 and self.kappa_d > 1 and self.kappa_m2 >= 0, "kappa_m1, kappa_d > 1; kappa_m2 >= 0"),
            (0 <= self.max_missing_frac < 1, "max_missing_frac must lie in [0, 1)"),
            (self.objective in ("censored", "expected"), "objective must be 'censored' or 'expected'"),
            (self.fit_restarts >= 1 and self.n_impute >= 2, "fit_restarts >= 1 and n_impute >= 2"),
            (self.temp0 > 0 and 0 < self.eta < 1, "temp0 > 0 and eta in (0, 1)"),
            (self.steps_per_node2 >= 1 and self.sa_restarts >= 1, "annealing lengths must be positive"),
            (0 < self.target_reduction <= 1, "target_reduction must lie in (0, 1]"),
            (self.top_cardinality >= 1 and self.max_cluster_size >= 2, "top_cardinality >= 1, max_cluster_size >= 2"),
            (self.clustering_mode in ("per-date", "frozen"), "clustering_mode must be 'per-date' or 'frozen'"),
            (self.k_keep >= 1 and self.p >= 1, "k_keep and p must be >= 1"),
            (self.n_scenarios >= 2, "n_scenarios must be >= 2"),
            (0 <= self.q_lo < self.q_hi <= 1, "require 0 <= q_lo < q_hi <= 1"),
            (set(self.granularities) <= {"asset", "zone", "system", "kind"}, "unknown granularity"),
            (0 <= int(self.seed) < 2**64, "seed must be an unsigned 64-bit integer"),
            (self.jobs >= 1, "jobs must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def anneal(self) -> AnnealParams:
        return AnnealParams(self.temp0, self.eta, self.steps_per_node2, self.sa_restarts, self.max_cluster_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = dict(d)
        if isinstance(kw.get("series_files"), str):
            kw["series_files"] = [kw["series_files"]]
        if isinstance(kw.get("granularities"), str):
            kw["granularities"] = [g.strip() for g in kw["granularities"].split(",")]
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Read a flat JSON or YAML document; relative data paths resolve
        against the config file's directory."""
        path = Path(path)
        text = path.read_text()
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a flat key-value document")
        cfg = cls.from_dict(data)
        base = path.parent
        rel = lambda p: str(p) if Path(p).is_absolute() else str(base / p)  # noqa: E731
        cfg.metadata_file = rel(cfg.metadata_file)
        cfg.series_files = [rel(p) for p in cfg.series_files]
        cfg.output_dir = rel(cfg.output_dir)
        return cfg

    def dump(self, path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        else:
            path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named stage, e.g. ``substream(s, "calibrate", asset, date)``."""
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
