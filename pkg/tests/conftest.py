import numpy as np
import pytest

from gridscen.config import RunConfig
from gridscen.pipeline import fit_all_meta
from gridscen.synth import SynthConfig, synthesize_truth


@pytest.fixture(scope="session")
def fleet():
    """Six-asset wind/solar fleet over two years with a known generating law."""
    assets, panels, truth = synthesize_truth(SynthConfig(n_assets=6, kinds=("wind", "solar"), n_days=730), 7)
    return assets, {p.asset_id: p for p in panels}, truth


@pytest.fixture(scope="session")
def fleet_meta(fleet):
    assets, panels, _ = fleet
    return fit_all_meta(assets, panels, RunConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record the verdict of one acceptance criterion for the summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        if number not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {number:2d}: NOT RUN")
            continue
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
