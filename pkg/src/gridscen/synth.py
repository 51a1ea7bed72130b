"""Synthetic fleets drawn exactly from the censored-Gaussian model with a
planted block correlation structure, for recovery and acceptance tests."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import fsolve
from scipy.special import expit, ndtr

from .calibration import SIGMA_FLOOR
from .ingest import HOURS, AssetRecord, DailyPanel, year_fraction

_QUAD_NODES = (np.arange(2000) + 0.5) / 2000


@dataclass
class SynthConfig:
    """Testbed settings.

    Point-mass probabilities ``p0``/``p1`` fix the levels of the bias and
    log-volatility curves; set either to ``None`` to use ``mu_level`` and
    ``log_sigma_level`` directly.
    """

    n_assets: int = 6
    kinds: tuple = ("wind",)  # cycled over assets
    n_days: int = 730
    start: str = "2021-01-01"
    capacity: float = 100.0
    p0: float | None = 0.05
    p1: float | None = 0.05
    mu_shape: tuple = (0.05, -0.05)  # linear and quadratic terms in the stabilized forecast
    log_sigma_shape: tuple = (2.0, -2.0)
    mu_level: float = 0.0
    log_sigma_level: float = -2.0
    sigma_scale: float = 1.0
    beta_a: float = 0.9
    beta_b: float = 0.9
    forecast_hour_ar: float = 0.9
    hour_ar: float = 0.6
    block_size: int = 3
    intra_rho: float = 0.8
    inter_rho: float = 0.1
    k_planted: int = 2
    n_zones: int = 2
    blocks: tuple | None = None  # explicit block label per asset

    def __post_init__(self):
        if self.n_assets < 1 or self.n_days < 1:
            raise ValueError("need at least one asset and one day")
        if not 0 <= self.hour_ar < 1 or not 0 <= self.forecast_hour_ar < 1:
            raise ValueError("AR coefficients must lie in [0, 1)")
        if not -1 < self.inter_rho <= self.intra_rho < 1 + 1e-12:
            raise ValueError("require -1 < inter_rho <= intra_rho <= 1")
        for p in (self.p0, self.p1):
            if p is not None and not 0 < p < 0.5:
                raise ValueError("point-mass probabilities must lie in (0, 0.5)")
        if self.blocks is not None and len(self.blocks) != self.n_assets:
            raise ValueError("blocks must label every asset")
        if not set(self.kinds) <= {"wind", "solar"}:
            raise ValueError(f"unknown kinds {self.kinds}")

    def to_dict(self) -> dict:
        return asdict(self)


def ar1_corr(n: int, a: float) -> np.ndarray:
    idx = np.arange(n)
    return a ** np.abs(idx[:, None] - idx[None, :])


def block_corr(labels, intra: float, inter: float) -> np.ndarray:
    labels = np.asarray(labels)
    C = np.where(labels[:, None] == labels[None, :], intra, inter).astype(float)
    np.fill_diagonal(C, 1.0)
    return C


@dataclass
class Truth:
    """Generating law of a synthetic fleet."""

    config: SynthConfig
    assets: list
    mu_coef: np.ndarray  # (3,) shared by all assets and hours
    log_sigma_coef: np.ndarray
    mu_beta: float
    sigma_beta: float
    psi: np.ndarray  # (24, 24) hour factors
    eigenvalues: np.ndarray
    asset_corr: np.ndarray  # (J, J) cross-asset amplitude correlation for planted factors
    blocks: np.ndarray
    sigma_floor: float = SIGMA_FLOOR
    p_zero: float = float("nan")
    p_max: float = float("nan")
    extras: dict = field(default_factory=dict)

    def stabilized(self, beta):
        return expit((np.asarray(beta, dtype=float) - self.mu_beta) / self.sigma_beta)

    def mu(self, beta, stabilized: bool = False):
        b = np.asarray(beta, dtype=float) if stabilized else self.stabilized(beta)
        return self.mu_coef[0] + self.mu_coef[1] * b + self.mu_coef[2] * b * b

    def sigma(self, beta, stabilized: bool = False):
        b = np.asarray(beta, dtype=float) if stabilized else self.stabilized(beta)
        if self.config.sigma_scale == 0:
            return np.zeros_like(b)
        q = self.log_sigma_coef[0] + self.log_sigma_coef[1] * b + self.log_sigma_coef[2] * b * b
        return self.config.sigma_scale * (self.sigma_floor + np.exp(q))

    def ratios(self, beta, z):
        return np.clip(beta + self.mu(beta) + self.sigma(beta) * z, 0.0, 1.0)

    def sample_deviates(self, n: int, rng) -> np.ndarray:
        """``(n, J, 24)`` hour deviates with the planted factor structure."""
        rng = np.random.default_rng(rng)
        J = len(self.assets)
        K = self.config.k_planted
        L = np.linalg.cholesky(self.asset_corr + 1e-12 * np.eye(J))
        gamma = rng.standard_normal((n, J, HOURS))
        gamma[:, :, :K] = np.einsum("ij,njk->nik", L, gamma[:, :, :K])
        gamma *= np.sqrt(self.eigenvalues)
        return gamma @ self.psi.T

    def sample_mwh(self, beta, scale, n: int, rng) -> np.ndarray:
        """Joint draws of MWh for one day: ``beta``/``scale`` are ``(J, 24)``."""
        z = self.sample_deviates(n, rng)
        return self.ratios(np.asarray(beta)[None], z) * np.asarray(scale)[None]


def solve_levels(mu_shape, log_sigma_shape, p0: float, p1: float, beta_a: float, beta_b: float,
                 sigma_scale: float = 1.0) -> tuple[float, float]:
    """Levels of the mu and log-sigma curves that plant point masses ``p0``
    (at zero) and ``p1`` (at the maximum) for Beta-distributed forecasts
    with population standardizers."""
    beta = stats.beta.ppf(_QUAD_NODES, beta_a, beta_b)
    b = expit((beta - beta_a / (beta_a + beta_b)) / stats.beta.std(beta_a, beta_b))
    mu_s = mu_shape[0] * b + mu_shape[1] * b * b
    ls_s = log_sigma_shape[0] * b + log_sigma_shape[1] * b * b

    def masses(x):
        sig = sigma_scale * (SIGMA_FLOOR + np.exp(x[1] + ls_s))
        mu = x[0] + mu_s
        return np.mean(ndtr((-beta - mu) / sig)), np.mean(ndtr((beta + mu - 1.0) / sig))

    sol, _, ier, msg = fsolve(lambda x: np.subtract(masses(x), (p0, p1)), [0.0, -1.5], full_output=True)
    if ier != 1 or np.max(np.abs(np.subtract(masses(sol), (p0, p1)))) > 1e-6:
        raise ValueError(f"cannot plant point masses p0={p0}, p1={p1}: {msg}")
    return float(sol[0]), float(sol[1])


def synthesize_truth(config: SynthConfig | None = None, rng=None):
    """Draw a synthetic fleet.

    Returns ``(assets, panels, truth)``. Wind assets produce in ratio space
    scaled by capacity; solar assets additionally follow a seasonal
    daylight window and clear-sky profile.
    """
    cfg = config or SynthConfig()
    rng = np.random.default_rng(rng)
    J = cfg.n_assets
    kinds = [cfg.kinds[j % len(cfg.kinds)] for j in range(J)]
    assets = [AssetRecord(f"{k[0].upper()}{j:03d}", k, cfg.capacity, 30.0 + 0.1 * j, -97.0 - 0.1 * j,
                          f"Z{j % cfg.n_zones}") for j, k in enumerate(kinds)]

    mu_beta = cfg.beta_a / (cfg.beta_a + cfg.beta_b)
    sigma_beta = float(stats.beta.std(cfg.beta_a, cfg.beta_b))
    if cfg.p0 is not None and cfg.p1 is not None and cfg.sigma_scale > 0:
        m0, s0 = solve_levels(cfg.mu_shape, cfg.log_sigma_shape, cfg.p0, cfg.p1, cfg.beta_a, cfg.beta_b,
                              cfg.sigma_scale)
    else:
        m0, s0 = cfg.mu_level, cfg.log_sigma_level
    R = ar1_corr(HOURS, cfg.hour_ar)
    w, v = np.linalg.eigh(R)
    order = np.argsort(w)[::-1]
    blocks = np.asarray(cfg.blocks) if cfg.blocks is not None else np.arange(J) // cfg.block_size
    truth = Truth(cfg, assets, np.array([m0, *cfg.mu_shape]), np.array([s0, *cfg.log_sigma_shape]),
                  mu_beta, sigma_beta, v[:, order], np.maximum(w[order], 0.0),
                  block_corr(blocks, cfg.intra_rho, cfg.inter_rho), blocks)

    n = cfg.n_days
    days = np.datetime64(cfg.start, "D") + np.arange(n)
    Lf = np.linalg.cholesky(ar1_corr(HOURS, cfg.forecast_hour_ar))
    beta = stats.beta.ppf(ndtr(rng.standard_normal((n, J, HOURS)) @ Lf.T), cfg.beta_a, cfg.beta_b)
    z = truth.sample_deviates(n, rng)
    alpha = truth.ratios(beta, z)

    scale = np.full((n, J, HOURS), cfg.capacity)
    phi = year_fraction(days)
    for j, a in enumerate(assets):
        if a.kind == "solar":
            scale[:, j, :] = cfg.capacity * solar_profile(phi)
    panels = [DailyPanel(a.asset_id, days, beta[:, j] * scale[:, j], alpha[:, j] * scale[:, j])
              for j, a in enumerate(assets)]
    live = scale > 0
    truth.p_zero = float(np.mean(alpha[live] == 0))
    truth.p_max = float(np.mean(alpha[live] == 1))
    truth.extras = {"beta": beta, "z": z, "scale": scale}
    return assets, panels, truth


def solar_profile(phi) -> np.ndarray:
    """``(days, 24)`` clear-sky shape times a seasonal envelope, in [0, 1]."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    c = np.cos(2 * np.pi * phi)[:, None]
    start, stop = 0.27 + 0.03 * c, 0.77 - 0.03 * c
    env = 0.8 - 0.15 * c
    tau = (np.arange(HOURS) + 0.5)[None, :] / HOURS
    u = (tau - start) / (stop - start)
    shape = np.where((u > 0) & (u < 1), np.sin(np.pi * np.clip(u, 0, 1)), 0.0)
    return env * shape


def sample_ratio_model(n: int, hours: int, truth_mu, truth_log_sigma, rng, beta_a=0.35, beta_b=0.35):
    """Draw ``(alpha, beta)`` panels ``(n, hours)`` from the censored model with
    population standardizers. Returns ``(alpha, beta, (mu_beta, sigma_beta))``."""
    rng = np.random.default_rng(rng)
    beta = rng.beta(beta_a, beta_b, size=(n, hours))
    mb = beta_a / (beta_a + beta_b)
    sb = float(stats.beta.std(beta_a, beta_b))
    b = expit((beta - mb) / sb)
    mu = np.polyval(np.asarray(truth_mu)[::-1], b)
    sig = SIGMA_FLOOR + np.exp(np.polyval(np.asarray(truth_log_sigma)[::-1], b))
    alpha = np.clip(beta + mu + sig * rng.standard_normal((n, hours)), 0.0, 1.0)
    return alpha, beta, (mb, sb)
