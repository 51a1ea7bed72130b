"""Forecast-conditional censored Gaussian model and Gaussianized deviates.

For each active hour the realized ratio is modelled as
``alpha = clip(beta + mu_h(b) + sigma_h(b) * Z, 0, 1)`` where ``b`` is the
logistic-stabilized forecast ratio and both ``mu_h`` and ``log(sigma_h -
floor)`` are quadratics in ``b``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, ndtr, ndtri

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
SQRT2 = math.sqrt(2.0)
EXP_LO, EXP_HI = -30.0, 5.0
EXP_CLIP = (EXP_LO, EXP_HI)
INTERIOR, LOW, HIGH, MISSING = 0, -1, 1, 2


class CalibrationError(RuntimeError):
    pass


def stabilize_forecast(beta, mu_beta: float, sigma_beta: float):
    """Logistic squashing of standardized forecast ratios into (0, 1)."""
    if not sigma_beta > 0:
        raise ValueError("sigma_beta must be positive")
    return expit((np.asarray(beta, dtype=float) - mu_beta) / sigma_beta)


def quad_design(b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    return np.stack([np.ones_like(b), b, b * b], axis=-1)


@dataclass(frozen=True, eq=False)
class MuSigmaModel:
    """Per-hour quadratic bias and volatility curves.

    ``mu_coef`` and ``sigma_coef`` are ``(H, 3)``; ``sigma_h(b) = floor +
    exp(sigma_coef[h] . [1, b, b^2])``.
    """

    mu_coef: np.ndarray
    sigma_coef: np.ndarray
    mu_beta: float
    sigma_beta: float
    sigma_floor: float = SIGMA_FLOOR
    objective: str = "censored"

    @property
    def n_hours(self) -> int:
        return int(self.mu_coef.shape[0])

    def stabilized(self, beta):
        return stabilize_forecast(beta, self.mu_beta, self.sigma_beta)

    def mu(self, beta, stabilized=False):
        """Bias for ``beta`` shaped ``(..., H)``."""
        b = np.asarray(beta, dtype=float) if stabilized else self.stabilized(beta)
        return np.einsum("...hk,hk->...h", quad_design(b), self.mu_coef)

    def sigma(self, beta, stabilized=False):
        b = np.asarray(beta, dtype=float) if stabilized else self.stabilized(beta)
        q = np.einsum("...hk,hk->...h", quad_design(b), self.sigma_coef)
        return self.sigma_floor + np.exp(np.clip(q, *EXP_CLIP))

    def to_dict(self) -> dict:
        return {"mu_coef": self.mu_coef.tolist(), "sigma_coef": self.sigma_coef.tolist(),
                "mu_beta": self.mu_beta, "sigma_beta": self.sigma_beta,
                "sigma_floor": self.sigma_floor, "objective": self.objective}

    @classmethod
    def from_dict(cls, d) -> "MuSigmaModel":
        return cls(np.asarray(d["mu_coef"], dtype=float).reshape(-1, 3),
                   np.asarray(d["sigma_coef"], dtype=float).reshape(-1, 3),
                   float(d["mu_beta"]), float(d["sigma_beta"]),
                   float(d.get("sigma_floor", SIGMA_FLOOR)), d.get("objective", "censored"))


# ------------------------------------------------------------------ likelihood


def classify(alpha, missing=None, tol: float = 1e-12) -> np.ndarray:
    """Censoring side per cell: INTERIOR, LOW (alpha = 0), HIGH (alpha = 1) or MISSING."""
    alpha = np.asarray(alpha, dtype=float)
    side = np.full(alpha.shape, INTERIOR, dtype=np.int8)
    side[alpha <= tol] = LOW
    side[alpha >= 1 - tol] = HIGH
    miss = ~np.isfinite(alpha) if missing is None else (np.asarray(missing, bool) | ~np.isfinite(alpha))
    side[miss] = MISSING
    return side


@numba.njit(cache=True)
def _log_ndtr(x):
    if x > -20.0:
        return math.log(0.5 * math.erfc(-x / SQRT2))
    x2 = x * x
    series = 1.0 - 1.0 / x2 + 3.0 / x2 ** 2 - 15.0 / x2 ** 3 + 105.0 / x2 ** 4
    return -0.5 * x2 - math.log(-x) - LOG_SQRT_2PI + math.log(series)


@numba.njit(cache=True)
def _nll_kernel(params, eps, bt, lo, hi, side, weight, floor, expected, hessian=False):
    G, n = eps.shape
    vals = np.zeros(G)
    grad = np.zeros((G, 6))
    hess = np.zeros((G, 6, 6))
    feat = np.zeros(3)
    for g in range(G):
        a0, a1, a2, b0, b1, b2 = params[g]
        for i in range(n):
            w = weight[g, i]
            s = side[g, i]
            if w == 0.0 or s == MISSING:
                continue
            x = bt[g, i]
            x2 = x * x
            mu = a0 + a1 * x + a2 * x2
            q = b0 + b1 * x + b2 * x2
            inside = EXP_LO < q < EXP_HI
            q = min(max(q, EXP_LO), EXP_HI)
            ex = math.exp(q)
            sig = floor + ex
            hmm = hms = hss = 0.0
            if s == INTERIOR:
                z = (eps[g, i] - mu) / sig
                f = 0.5 * z * z + math.log(sig)
                dmu = -z / sig
                dsig = (1.0 - z * z) / sig
                if hessian:
                    hmm = 1.0 / (sig * sig)
                    hms = 2.0 * z * hmm
                    hss = (3.0 * z * z - 1.0) * hmm
            else:
                bound = lo[g, i] if s == LOW else hi[g, i]
                c = (bound - mu) / sig
                logphi = -0.5 * c * c - LOG_SQRT_2PI
                if s == LOW:
                    logp = _log_ndtr(c)
                else:
                    logp = _log_ndtr(-c)
                lam = math.exp(logphi - logp)
                if not expected:
                    f = -logp
                    dfdc = -lam if s == LOW else lam
                    extra = 0.0
                    if hessian:
                        fcc = lam * (c + lam) if s == LOW else lam * (lam - c)
                        hmm = fcc / (sig * sig)
                        hms = (fcc * c + dfdc) / (sig * sig)
                        hss = (fcc * c * c + 2.0 * dfdc * c) / (sig * sig)
                else:
                    if s == LOW:
                        f = 0.5 * (1.0 - c * lam) + math.log(sig)
                        dfdc = 0.5 * lam * (c * c + c * lam - 1.0)
                    else:
                        f = 0.5 * (1.0 + c * lam) + math.log(sig)
                        dfdc = 0.5 * lam * (1.0 + c * lam - c * c)
                    extra = 1.0 / sig
                dmu = -dfdc / sig
                dsig = -dfdc * c / sig + extra
            vals[g] += w * f
            dmu *= w
            dq = w * dsig * ex if inside else 0.0
            grad[g, 0] += dmu
            grad[g, 1] += dmu * x
            grad[g, 2] += dmu * x2
            grad[g, 3] += dq
            grad[g, 4] += dq * x
            grad[g, 5] += dq * x2
            if hessian:
                # chain rule through sigma = floor + exp(q)
                if inside:
                    hmq = hms * ex
                    hqq = hss * ex * ex + dsig * ex
                else:
                    hmq = 0.0
                    hqq = 0.0
                feat[0] = 1.0
                feat[1] = x
                feat[2] = x2
                for r in range(3):
                    for c2 in range(3):
                        ff = w * feat[r] * feat[c2]
                        hess[g, r, c2] += hmm * ff
                        hess[g, r, 3 + c2] += hmq * ff
                        hess[g, 3 + r, c2] += hmq * ff
                        hess[g, 3 + r, 3 + c2] += hqq * ff
    return vals, grad, hess


def censored_objective(params, eps, bt, lo, hi, side, weight, sigma_floor=SIGMA_FLOOR,
                       kind: str = "censored"):
    """Negative log-likelihood per group and its gradient.

    All data arrays are ``(G, n)`` (groups padded with ``weight == 0``);
    ``params`` is ``(G, 6)`` = mu quadratic | log-sigma quadratic.
    ``kind='censored'`` uses the exact censored likelihood ``-log P(bound
    breached)`` for point masses; ``kind='expected'`` replaces it with the
    conditional expectation of the Gaussian negative log-density given the
    breach, using closed-form truncated-normal moments.

    Returns ``(values (G,), grad (G, 6))``.
    """
    if kind not in ("censored", "expected"):
        raise ValueError(f"unknown objective {kind!r}")
    vals, grad, _ = _objective(params, eps, bt, lo, hi, side, weight, sigma_floor, kind == "expected", False)
    return vals, grad


def censored_hessian(params, eps, bt, lo, hi, side, weight, sigma_floor=SIGMA_FLOOR):
    """Values, gradients and ``(G, 6, 6)`` Hessians of the censored objective."""
    return _objective(params, eps, bt, lo, hi, side, weight, sigma_floor, False, True)


def _objective(params, eps, bt, lo, hi, side, weight, sigma_floor, expected, hessian):
    f64 = lambda x: np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)  # noqa: E731
    return _nll_kernel(f64(params), f64(eps), f64(bt), f64(lo), f64(hi),
                       np.ascontiguousarray(np.atleast_2d(side), dtype=np.int8), f64(weight),
                       float(sigma_floor), bool(expected), bool(hessian))


@dataclass
class _Groups:
    eps: np.ndarray
    bt: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    side: np.ndarray
    weight: np.ndarray


def _pool_hours(side: np.ndarray, min_interior: int) -> list[np.ndarray]:
    """Hour index sets per hour, widened symmetrically until enough interior points."""
    H = side.shape[1]
    counts = (side == INTERIOR).sum(axis=0)
    pools = []
    for h in range(H):
        r = 0
        while True:
            lo, hi = max(h - r, 0), min(h + r + 1, H)
            if counts[lo:hi].sum() >= min_interior or (lo == 0 and hi == H):
                break
            r += 1
        if counts[lo:hi].sum() == 0:
            raise CalibrationError(f"hour position {h}: no interior observations even after pooling")
        if r:
            logger.debug("hour position %d pooled over [%d, %d)", h, lo, hi)
        pools.append(np.arange(lo, hi))
    return pools


def _build_groups(alpha, beta, bt, side, upper, pools) -> _Groups:
    n, H = alpha.shape
    width = max(len(p) for p in pools) * n
    G = len(pools)
    out = {k: np.zeros((G, width)) for k in ("eps", "bt", "lo", "hi", "weight")}
    sides = np.full((G, width), MISSING, dtype=np.int8)
    eps = alpha - beta
    for g, hours in enumerate(pools):
        cols = np.asarray(hours)
        flat = lambda x: x[:, cols].T.ravel()  # noqa: E731
        s = flat(side)
        k = s.size
        sides[g, :k] = s
        ok = s != MISSING
        out["eps"][g, :k] = np.nan_to_num(flat(eps))
        out["bt"][g, :k] = np.nan_to_num(flat(bt), nan=0.5)
        out["lo"][g, :k] = np.nan_to_num(-flat(beta))
        out["hi"][g, :k] = np.nan_to_num(upper - flat(beta))
        out["weight"][g, :k] = ok
    return _Groups(side=sides, **out)


def _initial_params(groups: _Groups, sigma_floor: float) -> np.ndarray:
    G = groups.eps.shape[0]
    p0 = np.zeros((G, 6))
    for g in range(G):
        m = (groups.side[g] == INTERIOR) & (groups.weight[g] > 0)
        X = quad_design(groups.bt[g, m])
        coef, *_ = np.linalg.lstsq(X, groups.eps[g, m], rcond=None)
        resid = groups.eps[g, m] - X @ coef
        sd = max(float(np.std(resid)) - sigma_floor, 1e-3)
        p0[g, :3] = coef
        p0[g, 3] = np.log(sd)
    return p0


# monomial coefficients of the shifted Legendre polynomials 1, 2b - 1, 6b^2 - 6b + 1
_LEGENDRE = np.array([[1.0, -1.0, 1.0], [0.0, 2.0, -6.0], [0.0, 0.0, 6.0]])


def _newton(theta, evaluate, counts, maxiter: int = 100, tol: float = 1e-14):
    """Per-group Newton iterations on ``(G, 6)`` parameters.

    The Hessian is made positive definite by taking absolute eigenvalues
    (floored), and each group backtracks until the Armijo condition holds.
    A group stops when its Newton decrement per observation drops below
    ``tol``. Returns ``(theta, values, converged)``.
    """
    f, g, H = evaluate(theta)
    done = ~np.isfinite(f)
    for _ in range(maxiter):
        w, V = np.linalg.eigh(H)
        w = np.maximum(np.abs(w), 1e-8 * np.maximum(np.abs(w).max(axis=1, keepdims=True), 1e-12))
        d = -np.einsum("gij,gj->gi", V, np.einsum("gji,gj->gi", V, g) / w)
        slope = np.einsum("gi,gi->g", g, d)
        done |= -slope / counts < tol
        if done.all():
            break
        t = np.where(done, 0.0, 1.0)
        pending = ~done
        for _ in range(40):
            f_new, g_new, H_new = evaluate(theta + t[:, None] * d)
            ok = pending & np.isfinite(f_new) & (f_new <= f + 1e-4 * t * slope)
            theta[ok] += t[ok, None] * d[ok]
            f[ok], g[ok], H[ok] = f_new[ok], g_new[ok], H_new[ok]
            pending &= ~ok
            if not pending.any():
                break
            t[pending] *= 0.5
        done |= pending  # no decrease possible along the step
    return theta, f, done


def fit_mu_sigma(alpha, beta, missing=None, upper: float = 1.0, *, objective: str = "censored",
                 restarts: int = 5, rng=None, sigma_floor: float = SIGMA_FLOOR,
                 min_interior: int = 30, maxiter: int = 500) -> MuSigmaModel:
    """Maximum-likelihood fit of the per-hour bias/volatility quadratics.

    ``alpha``/``beta`` are ``(days, H)`` production ratios. Point masses at
    0 and ``upper`` are treated as censored observations. Hours with fewer
    than ``min_interior`` interior points borrow data from neighbouring
    hours. The first start is a least-squares fit; ``restarts - 1``
    further starts are random perturbations of it, and the best start is
    kept per hour.
    """
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    if alpha.shape != beta.shape:
        raise ValueError("alpha and beta differ in shape")
    rng = np.random.default_rng(rng)
    side = classify(alpha, missing)
    side[~np.isfinite(beta)] = MISSING
    ok_beta = beta[side != MISSING]
    if ok_beta.size < 2:
        raise CalibrationError("not enough forecast data")
    mu_beta = float(np.mean(ok_beta))
    sigma_beta = float(np.std(ok_beta))
    if sigma_beta <= 1e-9:
        sigma_beta = 1.0
    bt = stabilize_forecast(beta, mu_beta, sigma_beta)

    pools = _pool_hours(side, min_interior)
    groups = _build_groups(alpha, beta, bt, side, upper, pools)
    G = len(pools)
    scale = max(1.0, float(groups.weight.sum(axis=1).max()))

    # optimise in a shifted-Legendre basis, which is far better conditioned
    # than the raw monomials on [0, 1]
    T = np.kron(np.eye(2), _LEGENDRE)

    def fun(flat):
        vals, grad = censored_objective(flat.reshape(G, 6) @ T.T, groups.eps, groups.bt, groups.lo, groups.hi,
                                        groups.side, groups.weight, sigma_floor, objective)
        return vals.sum() / scale, (grad @ T).ravel() / scale

    def evaluate(theta):
        vals, grad, hess = censored_hessian(theta @ T.T, groups.eps, groups.bt, groups.lo, groups.hi,
                                            groups.side, groups.weight, sigma_floor)
        return vals, grad @ T, np.einsum("ki,gkl,lj->gij", T, hess, T)

    counts = np.maximum(groups.weight.sum(axis=1), 1.0)
    theta0 = np.linalg.solve(T, _initial_params(groups, sigma_floor).T).T
    best = np.full(G, np.inf)
    best_p = theta0 @ T.T
    for r in range(max(restarts, 1)):
        start = theta0 if r == 0 else theta0 + rng.normal(0.0, [0.05, 0.05, 0.05, 0.3, 0.3, 0.3], size=theta0.shape)
        if objective == "censored":
            theta, _, _ = _newton(start.copy(), evaluate, counts, maxiter)
        else:
            theta = minimize(fun, start.ravel(), jac=True, method="L-BFGS-B",
                             options={"maxiter": maxiter, "gtol": 1e-8, "ftol": 1e-12}).x.reshape(G, 6)
        p = theta @ T.T
        vals, _ = censored_objective(p, groups.eps, groups.bt, groups.lo, groups.hi, groups.side,
                                     groups.weight, sigma_floor, objective)
        better = np.isfinite(vals) & (vals < best)
        best[better] = vals[better]
        best_p[better] = p[better]
    if not np.all(np.isfinite(best)) or not np.all(np.isfinite(best_p)):
        raise CalibrationError("likelihood optimisation failed on every restart")
    return MuSigmaModel(best_p[:, :3].copy(), best_p[:, 3:].copy(), mu_beta, sigma_beta, sigma_floor, objective)


def model_objective(model: MuSigmaModel, alpha, beta, missing=None, upper=1.0) -> float:
    """Total objective of ``model`` on ``(days, H)`` data (no pooling)."""
    alpha = np.atleast_2d(alpha)
    beta = np.atleast_2d(beta)
    side = classify(alpha, missing)
    bt = model.stabilized(beta)
    params = np.hstack([model.mu_coef, model.sigma_coef])
    w = (side != MISSING).T.astype(float)
    vals, _ = censored_objective(params, np.nan_to_num(alpha - beta).T, np.nan_to_num(bt, nan=0.5).T,
                                 np.nan_to_num(-beta).T, np.nan_to_num(upper - beta).T, side.T, w,
                                 model.sigma_floor, model.objective)
    return float(vals.sum())


# -------------------------------------------------------------------- deviates


@dataclass(frozen=True, eq=False)
class PartialDeviates:
    """Standardized residuals with censored cells left unknown.

    ``z`` is NaN wherever ``side != INTERIOR``; ``threshold`` holds the
    z-value of the breached bound for LOW/HIGH cells.
    """

    z: np.ndarray
    side: np.ndarray
    threshold: np.ndarray


def compute_deviates(alpha, beta, model: MuSigmaModel, missing=None, upper: float = 1.0) -> PartialDeviates:
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    side = classify(alpha, missing)
    side[~np.isfinite(beta)] = MISSING
    mu = model.mu(beta)
    sig = model.sigma(beta)
    z = np.where(side == INTERIOR, (alpha - beta - mu) / sig, np.nan)
    thr = np.full(alpha.shape, np.nan)
    thr = np.where(side == LOW, (-beta - mu) / sig, thr)
    thr = np.where(side == HIGH, (upper - beta - mu) / sig, thr)
    return PartialDeviates(z, side, thr)


def _interp_nan(values: np.ndarray) -> np.ndarray:
    ok = np.isfinite(values)
    if ok.all():
        return values
    idx = np.arange(values.size)
    return np.interp(idx, idx[ok], values[ok])


def interhour_correlation(z, min_pairs: int = 10):
    """Lag correlation ``rho(k)`` pooled over all hour pairs ``k`` apart.

    Non-finite cells (censored or missing) are excluded pairwise. Returns
    ``(rho, matrix)`` with ``matrix[h, h'] = rho(|h - h'|)``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    H = z.shape[1]
    rho = np.full(H, np.nan)
    rho[0] = 1.0
    for k in range(1, H):
        x, y = z[:, :-k].ravel(), z[:, k:].ravel()
        ok = np.isfinite(x) & np.isfinite(y)
        if ok.sum() < min_pairs:
            continue
        x, y = x[ok], y[ok]
        sx, sy = x.std(), y.std()
        if sx > 0 and sy > 0:
            rho[k] = float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))
    rho = np.clip(_interp_nan(rho), -1.0, 1.0)
    lag = np.abs(np.arange(H)[:, None] - np.arange(H)[None, :])
    return rho, rho[lag]


def psd_repair(matrix) -> np.ndarray:
    """Clamp negative eigenvalues to zero and renormalize to unit diagonal."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    m = 0.5 * (m + m.T)
    if not np.any(m):
        raise ValueError("cannot repair a zero matrix")
    w, v = np.linalg.eigh(m)
    if w.min() < 0:
        m = (v * np.maximum(w, 0.0)) @ v.T
    d = np.sqrt(np.diag(m))
    if np.any(d <= 0):
        raise ValueError("repaired matrix has a zero diagonal entry")
    out = m / np.outer(d, d)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return out


def repair_covariance(cov) -> np.ndarray:
    """PSD repair for a covariance: repair its correlation, restore the scale."""
    cov = np.asarray(cov, dtype=float)
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    live = sd > 0
    out = np.zeros_like(cov)
    if live.any():
        sub = cov[np.ix_(live, live)] / np.outer(sd[live], sd[live])
        out[np.ix_(live, live)] = psd_repair(sub) * np.outer(sd[live], sd[live])
    return out


@numba.njit(cache=True)
def ndtri_nb(p):
    """Inverse standard normal CDF (Wichura's AS241, ~1e-16 relative)."""
    if p <= 0.0:
        return -np.inf
    if p >= 1.0:
        return np.inf
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((r * 2509.0809287301226727 + 33430.575583588128105) * r + 67265.770927008700853) * r
                   + 45921.953931549871457) * r + 13731.693765509461125) * r + 1971.5909503065514427) * r
                + 133.14166789178437745) * r + 3.387132872796366608)
        den = (((((((r * 5226.495278852545925 + 28729.085735721942674) * r + 39307.89580009271061) * r
                   + 21213.794301586595867) * r + 5394.1960214247511077) * r + 687.1870074920579083) * r
                + 42.313330701600911252) * r + 1.0)
        return q * num / den
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((r * 7.7454501427834140764e-4 + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
                   + 1.27045825245236838258) * r + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                + 4.6303378461565452959) * r + 1.42343711074968357734)
        den = (((((((r * 1.05075007164441684324e-9 + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r
                   + 0.14810397642748007459) * r + 0.68976733498510000455) * r + 1.6763848301838038494) * r
                + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((r * 2.01033439929228813265e-7 + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r
                   + 0.026532189526576123093) * r + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                + 5.4637849111641143699) * r + 6.6579046435011037772)
        den = (((((((r * 2.04426310338993978564e-15 + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r
                   + 7.868691311456132591e-4) * r + 0.0148753612908506148525) * r + 0.13692988092273580531) * r
                + 0.59983220655588793769) * r + 1.0)
    val = num / den
    return -val if q < 0 else val


@numba.njit(cache=True)
def _ndtr_nb(x):
    return 0.5 * math.erfc(-x / SQRT2)


@numba.njit(cache=True)
def _draw(mean, sd, thr, side, u, min_prob):
    """Inverse-CDF draw from ``N(mean, sd^2)``, truncated beyond ``thr`` for
    censored cells. Returns ``(value, breach probability)``; when the breach
    is less likely than ``min_prob`` the value is ``thr`` itself."""
    if side == MISSING:
        return mean + sd * ndtri_nb(u), 1.0
    a = (thr - mean) / sd
    if side == LOW:
        p = _ndtr_nb(a)
        if p < min_prob:
            return thr, p
        return mean + sd * ndtri_nb(max(u * p, 1e-300)), p
    p = _ndtr_nb(-a)
    if p < min_prob:
        return thr, p
    return mean - sd * ndtri_nb(max(u * p, 1e-300)), p


@numba.njit(cache=True)
def _uniform(state):
    """splitmix64 step on a one-element ``uint64`` state; returns a double in [0, 1)."""
    state[0] += np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return float(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _stratified(half, state, u):
    """Fill ``u`` (length ``2 * half``) with stratified antithetic uniforms in random order."""
    for c in range(half):
        u[c] = c
    for c in range(half - 1, 0, -1):
        j = int(_uniform(state) * (c + 1))
        u[c], u[j] = u[j], u[c]
    for c in range(half):
        v = (u[c] + _uniform(state)) / half
        u[c] = v
        u[half + c] = 1.0 - v


@numba.njit(cache=True)
def _ghk_day(mean, cov, thr, sides, seed, half, min_prob):
    """Importance-sampled conditional mean of one day's unknown cells.

    Cells are drawn one after another from their Gaussian law given the
    cells already drawn, truncated to their censoring region; each sample
    is weighted by the product of the truncation probabilities it passed.
    """
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed)
    k = mean.size
    n = 2 * half
    L = np.linalg.cholesky(cov)
    eta = np.empty((k, n))  # standardized innovations
    draws = np.empty((k, n))
    logw = np.zeros(n)
    u = np.empty(n)
    for i in range(k):
        _stratified(half, state, u)
        sd = max(L[i, i], 1e-12)
        for c in range(n):
            m = mean[i]
            for j in range(i):
                m += L[i, j] * eta[j, c]
            x, p = _draw(m, sd, thr[i], sides[i], u[c], min_prob)
            draws[i, c] = x
            eta[i, c] = (x - m) / sd
            logw[c] += math.log(max(p, 1e-300))
    top = logw.max()
    w = np.exp(logw - top)
    w /= w.sum()
    out = np.zeros(k)
    for i in range(k):
        for c in range(n):
            out[i] += w[c] * draws[i, c]
    return out


def impute_censored(partial: PartialDeviates, corr, rng=None, n_samples: int = 2000,
                    min_prob: float = 1e-8) -> np.ndarray:
    """Replace unknown deviates by Monte Carlo conditional expectations.

    For each day the unknown cells are jointly Gaussian given the interior
    ones; censored cells are further restricted to lie beyond their bound.
    The expectation is estimated from ``n_samples`` sequential
    (Geweke-Hajivassiliou-Keane) importance samples with exact inverse-CDF
    truncated draws and stratified antithetic uniforms. A cell whose
    conditional breach probability is below ``min_prob`` takes the
    threshold value itself.
    """
    rng = np.random.default_rng(rng)
    corr = np.asarray(corr, dtype=float)
    z = partial.z.copy()
    side = partial.side
    thr = np.nan_to_num(partial.threshold)
    half = max(n_samples // 2, 1)
    for d in np.flatnonzero((side != INTERIOR).any(axis=1)):
        unk = np.flatnonzero(side[d] != INTERIOR)
        kn = np.flatnonzero(side[d] == INTERIOR)
        S_uu = corr[np.ix_(unk, unk)]
        if kn.size:
            S_uk = corr[np.ix_(unk, kn)]
            sol = np.linalg.lstsq(corr[np.ix_(kn, kn)], np.column_stack([z[d, kn], S_uk.T]), rcond=None)[0]
            mean = S_uk @ sol[:, 0]
            cov = S_uu - S_uk @ sol[:, 1:]
        else:
            mean = np.zeros(unk.size)
            cov = S_uu.copy()
        cov = 0.5 * (cov + cov.T) + 1e-10 * np.eye(unk.size)
        z[d, unk] = _ghk_day(mean, cov, thr[d, unk], side[d, unk].astype(np.int64),
                             int(rng.integers(0, 2**63 - 1)), half, min_prob)
    return z


def normal_scores(z) -> np.ndarray:
    """Per-column ``Phi^-1(rank / (n + 1))`` with ties broken by original order."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[0]
    order = np.argsort(z, axis=0, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(1, n + 1)[:, None].repeat(z.shape[1], axis=1), axis=0)
    return ndtri(ranks / (n + 1.0))


@dataclass(frozen=True, eq=False)
class DeviatePanel:
    """Complete deviates for one asset/window.

    ``z`` holds the imputed standardized residuals, ``z_tilde`` their
    per-hour normal scores and ``knots`` the sorted ``z`` per hour used to
    map simulated normal scores back to residuals.
    """

    z: np.ndarray
    z_tilde: np.ndarray
    side: np.ndarray
    threshold: np.ndarray

    @property
    def interior(self) -> np.ndarray:
        return self.side == INTERIOR

    @property
    def knots(self) -> np.ndarray:
        return np.sort(self.z, axis=0)


def gaussianize(z_complete, partial: PartialDeviates | None = None) -> DeviatePanel:
    z = np.atleast_2d(np.asarray(z_complete, dtype=float))
    if not np.all(np.isfinite(z)):
        raise ValueError("deviate panel still has unknown cells")
    side = partial.side if partial is not None else np.zeros(z.shape, dtype=np.int8)
    thr = partial.threshold if partial is not None else np.full(z.shape, np.nan)
    return DeviatePanel(z, normal_scores(z), side, thr)


# ------------------------------------------------------------- orchestration


@dataclass(frozen=True, eq=False)
class AssetCalibration:
    """Everything fitted for one asset around one target date.

    ``z`` is the complete (imputed) deviate panel over ``days`` x
    ``active_hours``; the normal scores and copula knots derive from it.
    """

    asset_id: str
    kind: str
    target_date: np.datetime64
    active_hours: np.ndarray
    hourly_max: np.ndarray
    daily_max: float
    boundaries: tuple
    model: MuSigmaModel
    rho: np.ndarray
    days: np.ndarray
    z: np.ndarray
    n_censored: tuple = (0, 0)

    @property
    def z_tilde(self) -> np.ndarray:
        return normal_scores(self.z)

    @property
    def knots(self) -> np.ndarray:
        return np.sort(self.z, axis=0)

    def to_dict(self) -> dict:
        return {
            "asset_id": self.asset_id, "kind": self.kind, "target_date": str(self.target_date),
            "active_hours": [int(h) + 1 for h in self.active_hours],
            "hourly_max": self.hourly_max.tolist(), "daily_max": self.daily_max,
            "boundaries": list(self.boundaries), "model": self.model.to_dict(), "rho": self.rho.tolist(),
            "days": [str(d) for d in self.days], "z": self.z.tolist(), "n_censored": list(self.n_censored)}

    @classmethod
    def from_dict(cls, d) -> "AssetCalibration":
        H = len(d["active_hours"])
        return cls(d["asset_id"], d["kind"], np.datetime64(d["target_date"], "D"),
                   np.asarray(d["active_hours"], dtype=int) - 1, np.asarray(d["hourly_max"], dtype=float),
                   float(d["daily_max"]), tuple(d["boundaries"]), MuSigmaModel.from_dict(d["model"]),
                   np.asarray(d["rho"], dtype=float), np.asarray(d["days"], dtype="datetime64[D]"),
                   np.asarray(d["z"], dtype=float).reshape(-1, H), tuple(d.get("n_censored", (0, 0))))


def calibrate_ratios(ratios, rng=None, *, objective: str = "censored", restarts: int = 5,
                     n_impute: int = 2000, kind: str = "") -> AssetCalibration:
    """Fit the censored model on a ratio panel and build the complete deviates."""
    rng = np.random.default_rng(rng)
    model = fit_mu_sigma(ratios.alpha, ratios.beta, ratios.missing, objective=objective,
                         restarts=restarts, rng=rng)
    partial = compute_deviates(ratios.alpha, ratios.beta, model, ratios.missing)
    rho, M = interhour_correlation(partial.z) if partial.z.shape[1] > 1 else (np.ones(1), np.ones((1, 1)))
    M = psd_repair(M)
    z = impute_censored(partial, M, rng, n_samples=n_impute)
    return AssetCalibration(
        ratios.asset_id, kind, ratios.target_date, ratios.active_hours, ratios.hourly_max, ratios.daily_max,
        tuple(float(b) for b in ratios.boundaries), model, rho, ratios.days, z,
        (int((partial.side == LOW).sum()), int((partial.side == HIGH).sum())))
