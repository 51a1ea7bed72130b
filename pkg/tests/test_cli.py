import json
import time

import numpy as np
import pandas as pd
import pytest

from gridscen.calibration import AssetCalibration
from gridscen.cli import EXIT_ARTIFACT, EXIT_STAGE, main
from gridscen.storage import read_artifact

DATE = "2021-09-01"


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Full pipeline on the six-asset fixture; returns (dir, elapsed seconds)."""
    d = tmp_path_factory.mktemp("fleet")
    t0 = time.perf_counter()
    assert main(["--seed", "3", "synth", "--out", str(d), "--assets", "6", "--days", "400",
                 "--kinds", "wind,solar"]) == 0
    cfg = ["--config", str(d / "config.yaml")]
    assert main(cfg + ["metacalibrate"]) == 0
    assert main(cfg + ["calibrate", "--date", DATE]) == 0
    assert main(cfg + ["cluster", "--date", DATE]) == 0
    assert main(cfg + ["simulate", "--date", DATE, "-n", "200", "--binary"]) == 0
    assert main(cfg + ["assess", "--start", DATE, "--end", DATE]) == 0
    return d, time.perf_counter() - t0


def test_end_to_end_outputs(run):
    d, elapsed = run
    out = d / "out"
    assert elapsed < 30
    assert len(list((out / "meta").glob("*.json"))) == 6
    assert len(list((out / "calib").glob(f"*/{DATE}.json"))) == 6
    assert (out / "clusters" / f"{DATE}.json").exists()
    nodes = pd.read_csv(out / "clusters" / f"{DATE}_nodes.csv")
    assert list(nodes.columns) == ["kind", "level", "node_id", "n_members"]
    scen = pd.read_csv(out / f"scenarios_{DATE}.csv")
    assert list(scen.columns) == ["scenario", "asset_id", "hour", "mwh"]
    assert len(scen) == 200 * 6 * 24 and scen["mwh"].min() >= 0
    assert (out / f"scenarios_{DATE}.f32").stat().st_size == 200 * 6 * 24 * 4
    for gran in ("asset", "zone", "system"):
        rep = pd.read_csv(out / f"report_{DATE}_{DATE}_{gran}.csv")
        assert list(rep.columns) == ["unit", "metric", "value"]
        assert (out / f"pit_hist_{DATE}_{DATE}_{gran}.csv").exists()


def test_calibration_outputs_sane(run):
    d, _ = run
    for path in (d / "out" / "calib").glob(f"*/{DATE}.json"):
        c = AssetCalibration.from_dict(read_artifact(path, "calibration"))
        assert np.all(np.isfinite(c.model.mu_coef)) and np.all(np.isfinite(c.model.sigma_coef))
        n = c.z.shape[0]
        assert np.all(np.abs(c.z_tilde.mean(axis=0)) <= 3 / np.sqrt(n))
        assert np.all(np.abs(c.z.mean(axis=0)) <= 3 / np.sqrt(n) * c.z.std(axis=0).max() + 0.1)


def test_metacalibrate_idempotent(run):
    d, _ = run
    files = sorted((d / "out" / "meta").glob("*.json"))
    before = [f.read_bytes() for f in files]
    assert main(["--config", str(d / "config.yaml"), "metacalibrate"]) == 0
    assert [f.read_bytes() for f in files] == before


def test_simulate_seed_determinism(run):
    d, _ = run
    cfg = ["--config", str(d / "config.yaml")]
    path = d / "out" / f"scenarios_{DATE}.csv"
    first = path.read_bytes()
    assert main(cfg + ["simulate", "--date", DATE, "-n", "200"]) == 0
    assert path.read_bytes() == first
    assert main(cfg + ["--seed", "4", "simulate", "--date", DATE, "-n", "200"]) == 0
    assert path.read_bytes() != first
    assert main(cfg + ["simulate", "--date", DATE, "-n", "200"]) == 0


def test_corrupted_upstream_is_checksum_error(run, capsys):
    d, _ = run
    cfg = ["--config", str(d / "config.yaml")]
    cpath = d / "out" / "clusters" / f"{DATE}.json"
    original = cpath.read_text()
    body = json.loads(original)
    body["payload"]["p"] = 99
    cpath.write_text(json.dumps(body))
    try:
        assert main(cfg + ["simulate", "--date", DATE, "-n", "10"]) == EXIT_ARTIFACT
        assert "ChecksumError" in capsys.readouterr().err
    finally:
        cpath.write_text(original)


def test_missing_upstream_named(run, capsys):
    d, _ = run
    cfg = ["--config", str(d / "config.yaml")]
    assert main(cfg + ["cluster", "--date", "2021-09-02"]) == EXIT_ARTIFACT
    err = capsys.readouterr().err
    assert "2021-09-02.json" in err and "missing" in err
    assert main(cfg + ["assess", "--start", "2021-09-02", "--end", "2021-09-02"]) == EXIT_ARTIFACT
    assert "2021-09-02" in capsys.readouterr().err


def test_stale_input_refused_unless_forced(run, capsys):
    d, _ = run
    cfg = ["--config", str(d / "config.yaml")]
    series = d / "series.csv"
    original = series.read_bytes()
    try:
        series.write_bytes(original + b"\n")
        assert main(cfg + ["cluster", "--date", DATE]) == EXIT_ARTIFACT
        assert "stale" in capsys.readouterr().err
    finally:
        series.write_bytes(original)


def test_missing_series_named(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--assets", "2", "--days", "120"]) == 0
    with open(tmp_path / "assets.csv", "a") as fh:
        fh.write("GHOST,wind,50,30.0,-97.0,Z0\n")
    assert main(["--config", str(tmp_path / "config.yaml"), "metacalibrate"]) == EXIT_STAGE
    err = capsys.readouterr().err
    assert "GHOST" in err and "no series data" in err


def test_bad_config_exit_code(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("theta: 0.9\n")
    assert main(["--config", str(tmp_path / "c.yaml"), "metacalibrate"]) == 2
    assert "theta" in capsys.readouterr().err
