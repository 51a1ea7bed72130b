import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from gridscen.assess import ScoreReport, coverage, crps, energy_score, ensemble_quantile, pit, score_days
from gridscen.synth import SynthConfig, synthesize_truth


def crps_integral(x, g):
    """Oracle: integral of (F_N(y) - 1{y >= g})^2 over the real line, piecewise."""
    x = np.sort(np.asarray(x, dtype=float))
    knots = np.unique(np.r_[x, g])
    N = x.size
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        mid = 0.5 * (a + b)
        F = np.sum(x <= mid) / N
        H = 1.0 if mid >= g else 0.0
        total += integrate.quad(lambda y: (F - H) ** 2, a, b)[0]
    return total


# ------------------------------------------------------------ CRPS and ES


def test_crps_two_atom_integral():
    assert crps([0.0, 2.0], 1.0) == pytest.approx(crps_integral([0.0, 2.0], 1.0), abs=1e-10)
    assert crps([0.0, 2.0], 1.0) == pytest.approx(0.5, abs=1e-12)
    assert crps([0.0, 2.0], 1.0, fair=True) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=15), st.floats(-120, 120))
def test_crps_matches_integral(xs, g):
    assert crps(xs, g) == pytest.approx(crps_integral(xs, g), abs=1e-8)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.integers(2, 30))
def test_crps_degenerate(c, g, n):
    assert crps(np.full(n, c), g) == abs(c - g)
    assert crps(np.full(n, c), g, fair=True) == abs(c - g)


def test_crps_zero_iff_degenerate_at_actual():
    assert crps([3.0, 3.0, 3.0], 3.0) == 0.0
    assert crps([3.0, 3.1, 3.0], 3.0) > 0.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=20), st.floats(-60, 60), st.booleans())
def test_energy_score_m1_equals_crps(xs, g, fair):
    assert energy_score(np.asarray(xs)[:, None], [g], fair) == pytest.approx(crps(xs, g, fair), abs=1e-12)


def test_energy_score_hand_case():
    X = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]])
    G = np.array([0.0, 0.0])
    first = (0 + 5 + 1) / 3
    pair = 2 * (5 + 1 + np.hypot(3, 3))
    assert energy_score(X, G) == pytest.approx(first - pair / 18)
    assert energy_score(X, G, fair=True) == pytest.approx(first - pair / 12)
    assert energy_score(np.ones((4, 3)), np.ones(3)) == 0.0
    with pytest.raises(ValueError):
        energy_score(X, np.zeros(3))
    with pytest.raises(ValueError):
        crps([1.0], 0.0)


# ------------------------------------------------------------ PIT


def test_pit_extremes_and_ties():
    x = np.arange(1.0, 11.0)
    assert pit(x, -5.0, rng=0) <= 1 / 11
    # the unrandomized upper rank #{x <= g} / (N + 1) is reached at V = 1
    assert pit(x, 10.0, v=1.0) >= 10 / 11
    assert pit(x, 10.0, v=0.0) == pytest.approx(9 / 11)
    u = np.array([pit(np.full(10, 2.0), 2.0, rng=s) for s in range(2000)])
    assert stats.kstest(u, "uniform").pvalue > 0.01
    with pytest.raises(ValueError):
        pit([1.0], 0.0)


def test_pit_deterministic_and_batched():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 20))
    g = rng.standard_normal(5)
    a, b = pit(x, g, rng=3), pit(x, g, rng=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (5,) and np.all((a >= 0) & (a <= 1))


def test_pit_calibrated_ensemble_uniform():
    passes = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((365, 200))
        g = rng.standard_normal(365)
        passes += stats.kstest(pit(x, g, rng), "uniform").pvalue > 0.05
    assert passes >= 9


# ------------------------------------------------------------ coverage


def test_coverage_examples():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((50, 101))
    med = np.median(x, axis=1)
    assert coverage(x, med) == (0, 0)
    g = rng.standard_normal(50)
    assert coverage(x, g, 0.0, 1.0)[0] == int(np.sum(g < x.min(axis=1)))


def test_coverage_well_specified_tails():
    ok = np.zeros(2, int)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((365, 1000))
        g = rng.standard_normal(365)
        ok += [0.065 <= c / 365 <= 0.135 for c in coverage(x, g)]
    assert np.all(ok >= 9)


def test_ensemble_quantile_plotting_position():
    x = np.arange(1.0, 10.0)  # N = 9: rank r sits at r / 10
    assert ensemble_quantile(x, 0.1) == 1.0
    assert ensemble_quantile(x, 0.5) == 5.0
    assert ensemble_quantile(x, 0.25) == pytest.approx(2.5)
    assert ensemble_quantile(x, 0.0) == 1.0 and ensemble_quantile(x, 1.0) == 9.0


# ------------------------------------------------------------ reports


def test_score_report_files(tmp_path):
    rng = np.random.default_rng(3)
    days = ["2022-01-01", "2022-01-02"]
    scen = [{"z1": rng.random((50, 24))} for _ in days]
    act = [{"z1": rng.random(24)} for _ in days]
    rep = score_days(days, scen, act, "zone", rng=0)
    assert isinstance(rep, ScoreReport)
    rows = {m: v for _, m, v in rep.rows()}
    assert rows["instants"] == 48
    assert 0 <= rows["pit_mean"] <= 1
    assert rows["lower_tail_count"] + rows["upper_tail_count"] <= 48
    rep.write(tmp_path / "r.csv", tmp_path / "h.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "unit,metric,value"
    hist = (tmp_path / "h.csv").read_text().splitlines()
    assert hist[0] == "unit,bin_lo,bin_hi,count"
    assert sum(int(line.split(",")[-1]) for line in hist[1:]) == 48


def test_missing_actual_hours_skipped():
    rng = np.random.default_rng(4)
    act = rng.random(24)
    act[:6] = np.nan
    rep = score_days(["d"], [{"u": rng.random((20, 24))}], [{"u": act}], "asset", rng=0)
    assert rep.units["u"].instants == 18
    assert rep.units["u"].es == []


# ------------------------------------------------------------ synthetic truth


def test_synth_zero_noise_actual_equals_forecast():
    cfg = SynthConfig(n_assets=2, kinds=("wind",), n_days=60, sigma_scale=0.0, p0=None, p1=None,
                      mu_shape=(0.0, 0.0), mu_level=0.0)
    _, panels, _ = synthesize_truth(cfg, 0)
    for p in panels:
        np.testing.assert_allclose(p.actual, p.forecast, atol=1e-12)


def test_synth_planted_point_masses():
    cfg = SynthConfig(n_assets=3, kinds=("wind",), n_days=400, p0=0.05, p1=0.05)
    _, panels, truth = synthesize_truth(cfg, 1)
    frac0 = np.mean([np.mean(p.actual <= 0) for p in panels])
    frac1 = np.mean([np.mean(p.actual >= cfg.capacity) for p in panels])
    assert abs(frac0 - 0.05) < 0.015 and abs(frac1 - 0.05) < 0.015
    assert truth.p_zero == pytest.approx(frac0)


def test_synth_block_correlation_reproduced():
    cfg = SynthConfig(n_assets=6, kinds=("wind",), n_days=1000, block_size=3, intra_rho=0.8, inter_rho=0.1)
    _, _, truth = synthesize_truth(cfg, 2)
    gamma1 = truth.extras["z"] @ truth.psi[:, 0]
    np.testing.assert_allclose(np.corrcoef(gamma1, rowvar=False), truth.asset_corr, atol=0.05)
    with pytest.raises(ValueError):
        SynthConfig(intra_rho=0.1, inter_rho=0.5)
