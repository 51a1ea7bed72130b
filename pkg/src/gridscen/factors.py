"""Principal-component factors of an asset's Gaussianized deviate panel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class AssetFactors:
    """Eigen-structure of one asset's deviates over its active hours.

    Columns of ``psi`` are the factors (descending ``eigenvalues``);
    ``gamma[d, k]`` is the amplitude of factor ``k`` on day ``d``.
    """

    asset_id: str
    active_hours: np.ndarray
    days: np.ndarray
    psi: np.ndarray
    eigenvalues: np.ndarray
    gamma: np.ndarray

    @property
    def n_factors(self) -> int:
        return int(self.eigenvalues.size)

    def amplitude_series(self, k: int) -> np.ndarray:
        """Amplitudes of factor ``k`` (1-based) by window day."""
        if not 1 <= k <= self.n_factors:
            raise IndexError(f"factor index {k} outside 1..{self.n_factors}")
        return self.gamma[:, k - 1]

    def reconstruct(self, gamma=None) -> np.ndarray:
        g = self.gamma if gamma is None else np.asarray(gamma, dtype=float)
        return g @ self.psi.T


def _fix_signs(psi: np.ndarray) -> np.ndarray:
    psi = psi.copy()
    for k in range(psi.shape[1]):
        col = psi[:, k]
        s = col.sum() if k == 0 else 0.0
        if k > 0 or abs(s) < 1e-12:
            s = col[np.argmax(np.abs(col))]
        if s < 0:
            psi[:, k] = -col
    return psi


def fit_factors(z_tilde, asset_id: str = "", active_hours=None, days=None) -> AssetFactors:
    """PCA of the day-by-hour deviate panel.

    The covariance is ``Z^T Z / (n - 1)`` without re-centering, since the
    normal scores already have zero median. The first factor is oriented so
    its loadings sum to a positive number (a larger amplitude then means
    more production); later factors make their largest-magnitude loading
    positive.
    """
    z = np.atleast_2d(np.asarray(z_tilde, dtype=float))
    n, H = z.shape
    if n < H + 1:
        raise ValueError(f"{asset_id or 'panel'}: need at least {H + 1} days for {H} hours, got {n}")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{asset_id or 'panel'}: deviate panel has missing cells")
    cov = z.T @ z / (n - 1)
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(w)[::-1]
    lam = np.maximum(w[order], 0.0)
    psi = _fix_signs(v[:, order])
    hours = np.arange(H) if active_hours is None else np.asarray(active_hours)
    return AssetFactors(asset_id, hours, np.asarray(days) if days is not None else np.arange(n),
                        psi, lam, z @ psi)
