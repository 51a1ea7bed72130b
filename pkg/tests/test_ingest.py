import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridscen.ingest import (AssetRecord, CalibrationInfeasible, DailyPanel, IngestError, build_window,
                             circular_distance, load_panels, write_assets, write_series, year_fraction)


class TestYearFraction:
    def test_jan_first(self):
        assert year_fraction("2021-01-01") == 0.0

    def test_day_183(self):
        assert year_fraction("2021-07-02") == pytest.approx(182 / 365, abs=1e-15)

    def test_dec_31(self):
        assert year_fraction("2021-12-31") == pytest.approx(364 / 365, abs=1e-15)

    def test_leap_year_uses_366(self):
        assert year_fraction("2020-12-31") == pytest.approx(365 / 366, abs=1e-15)

    def test_invalid_date(self):
        with pytest.raises(ValueError):
            year_fraction("2021-02-30")

    @given(st.integers(1990, 2100))
    def test_grid_and_monotone(self, year):
        days = np.arange(np.datetime64(f"{year}-01-01"), np.datetime64(f"{year + 1}-01-01"))
        phi = year_fraction(days)
        assert np.all(np.diff(phi) > 0)
        np.testing.assert_allclose(phi * len(days), np.arange(len(days)), atol=1e-9)


class TestWindow:
    year = np.arange(np.datetime64("2021-01-01"), np.datetime64("2022-01-01"))

    def test_april_first_theta_015(self):
        w = build_window("2021-04-01", 0.15, self.year)
        # distance <= 0.15 admits 54 days on each side (54/365 < 0.15 < 55/365)
        assert len(w) == 109
        assert np.datetime64("2021-04-01") in w.members

    def test_full_circle(self):
        assert len(build_window("2021-08-15", 0.5, self.year)) == 365

    def test_wraps_year_end(self):
        w = build_window("2021-01-01", 0.02, self.year)
        expected = set(np.arange(np.datetime64("2021-01-01"), np.datetime64("2021-01-09")).tolist())
        expected |= set(np.arange(np.datetime64("2021-12-25"), np.datetime64("2022-01-01")).tolist())
        assert set(w.members.tolist()) == expected
        assert len(w) == 15

    def test_two_years(self):
        two = np.arange(np.datetime64("2021-01-01"), np.datetime64("2023-01-01"))
        assert abs(len(build_window("2022-06-01", 0.15, two)) - 2 * 0.3 * 365) <= 2

    def test_isolated_target(self):
        with pytest.raises(CalibrationInfeasible):
            build_window("2021-07-01", 0.01, self.year[:30])

    def test_bad_theta(self):
        with pytest.raises(ValueError):
            build_window("2021-07-01", 0.6, self.year)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 364), st.integers(0, 364), st.floats(0.01, 0.5))
    def test_symmetric(self, i, j, theta):
        a, b = self.year[i], self.year[j]
        assert (b in build_window(a, theta, self.year).members) == (a in build_window(b, theta, self.year).members)

    def test_circular_distance(self):
        assert circular_distance(0.95, 0.05) == pytest.approx(0.1)


def _write(tmp_path, assets, rows):
    (tmp_path / "assets.csv").write_text(assets)
    (tmp_path / "series.csv").write_text(rows)
    return tmp_path / "assets.csv", tmp_path / "series.csv"


ASSETS = ("asset_id,kind,nominal_capacity_mw,latitude,longitude,zone\n"
          "A,wind,100,30,-97,Z1\nB,solar,50,31,-98,Z2\n")


def _series(edit=None):
    lines = ["asset_id,date,hour,forecast_mwh,actual_mwh"]
    for a in "AB":
        for h in range(1, 25):
            lines.append(f"{a},2021-03-01,{h},10,{h}")
    if edit:
        edit(lines)
    return "\n".join(lines) + "\n"


class TestLoad:
    def test_two_assets(self, tmp_path):
        assets, panels = load_panels(*_write(tmp_path, ASSETS, _series()))
        assert [a.asset_id for a in assets] == ["A", "B"]
        assert len(panels) == 2 and all(p.missing.sum() == 0 for p in panels)
        assert panels[0].actual[0, 4] == 5.0

    def test_blank_cell_missing(self, tmp_path):
        def blank(lines):
            lines[3] = "A,2021-03-01,3,10,"
        _, panels = load_panels(*_write(tmp_path, ASSETS, _series(blank)))
        assert panels[0].missing[0, 2] and panels[0].missing.sum() == 1

    def test_unparseable_is_missing(self, tmp_path):
        def junk(lines):
            lines[3] = "A,2021-03-01,3,abc,1"
        _, panels = load_panels(*_write(tmp_path, ASSETS, _series(junk)))
        assert panels[0].missing[0, 2]

    def test_negative_names_row(self, tmp_path):
        def neg(lines):
            lines[5] = "A,2021-03-01,5,10,-1"
        with pytest.raises(IngestError, match="line 6"):
            load_panels(*_write(tmp_path, ASSETS, _series(neg)))

    def test_duplicate_row(self, tmp_path):
        with pytest.raises(IngestError, match="duplicate"):
            load_panels(*_write(tmp_path, ASSETS, _series(lambda ls: ls.append(ls[1]))))

    def test_unknown_asset(self, tmp_path):
        with pytest.raises(IngestError, match="unknown asset_id"):
            load_panels(*_write(tmp_path, ASSETS, _series(lambda ls: ls.append("Z,2021-03-01,1,1,1"))))

    def test_schema(self, tmp_path):
        with pytest.raises(IngestError, match="header"):
            load_panels(*_write(tmp_path, ASSETS.replace("zone", "region"), _series()))

    def test_bad_capacity(self):
        with pytest.raises(IngestError):
            AssetRecord("X", "wind", 0.0)

    def test_roundtrip_bytes(self, tmp_path):
        a_path, s_path = _write(tmp_path, ASSETS, _series())
        assets, panels = load_panels(a_path, s_path)
        write_assets(assets, tmp_path / "a2.csv")
        write_series(panels, tmp_path / "s2.csv")
        _, again = load_panels(tmp_path / "a2.csv", tmp_path / "s2.csv")
        write_series(again, tmp_path / "s3.csv")
        assert (tmp_path / "s2.csv").read_bytes() == (tmp_path / "s3.csv").read_bytes()
        np.testing.assert_array_equal(again[1].actual, panels[1].actual)


def test_panel_rejects_negative():
    with pytest.raises(IngestError):
        DailyPanel("X", [dt.date(2021, 1, 1)], np.ones((1, 24)), -np.ones((1, 24)))
