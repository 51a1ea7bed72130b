"""Per-cluster factor-amplitude correlations, propagation subsets and the
top-level cross-kind covariance."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .calibration import psd_repair, repair_covariance
from .clustering import Hierarchy

logger = logging.getLogger(__name__)

MIN_COMMON_DAYS = 20


class CorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class Amplitudes:
    """Day-indexed factor amplitudes of one asset (``gamma[d, k]``)."""

    asset_id: str
    days: np.ndarray
    gamma: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_factors(self) -> int:
        return int(self.gamma.shape[1])


def align(amps: Sequence[Amplitudes], min_days: int = MIN_COMMON_DAYS) -> list[np.ndarray]:
    """Row indices of each asset's amplitudes on the intersection of their days."""
    common = amps[0].days
    for a in amps[1:]:
        common = np.intersect1d(common, a.days)
    if common.size < min_days:
        raise CorrelationError(f"only {common.size} common days across "
                               f"{', '.join(a.asset_id for a in amps)} (need {min_days})")
    return [np.searchsorted(a.days, common) for a in amps]


def _factor_matrix(amps: Sequence[Amplitudes], rows, k: int) -> np.ndarray:
    cols = []
    for a, r in zip(amps, rows):
        x = a.gamma[r, k] if k < a.n_factors else np.zeros(len(r))
        cols.append(x)
    return np.column_stack(cols)


def _pearson(x: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    x = x - x.mean(axis=0)
    sd = np.sqrt((x * x).sum(axis=0))
    if np.any(sd <= 1e-12 * max(1.0, sd.max())):
        bad = [ids[i] for i in np.flatnonzero(sd <= 1e-12 * max(1.0, sd.max()))]
        raise CorrelationError(f"constant amplitude series for {', '.join(bad)}")
    r = np.clip((x.T @ x) / np.outer(sd, sd), -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return r


@dataclass(frozen=True, eq=False)
class ClusterCorr:
    """Correlations ``A[k]`` among the contributing members of one cluster."""

    kind: str
    level: int
    cluster_id: str
    members: tuple
    A: np.ndarray  # (K, m, m)
    subset: tuple

    def to_dict(self) -> dict:
        return {"kind": self.kind, "level": self.level, "cluster_id": self.cluster_id,
                "members": list(self.members), "subset": list(self.subset), "A": self.A.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ClusterCorr":
        return cls(d["kind"], int(d["level"]), d["cluster_id"], tuple(d["members"]),
                   np.asarray(d["A"], dtype=float), tuple(d["subset"]))


def cluster_correlations(members: Sequence[str], amplitudes: Mapping[str, Amplitudes], k_keep: int = 2,
                         min_days: int = MIN_COMMON_DAYS) -> np.ndarray:
    """Same-factor Pearson correlations over common days, each PSD-repaired.

    Returns ``(k_keep, m, m)``. Members with fewer factors than ``k_keep``
    contribute an identity row for the missing factors.
    """
    amps = [amplitudes[m] for m in members]
    rows = align(amps, min_days)
    out = np.empty((k_keep, len(amps), len(amps)))
    for k in range(k_keep):
        have = [i for i, a in enumerate(amps) if k < a.n_factors]
        A = np.eye(len(amps))
        if len(have) > 1:
            sub = _factor_matrix([amps[i] for i in have], [rows[i] for i in have], k)
            A[np.ix_(have, have)] = psd_repair(_pearson(sub, [members[i] for i in have]))
        out[k] = A
    return out


def conditional_trace(cov, subset) -> float:
    """``trace(S - S[:, s] S[s, s]^-1 S[s, :])``, ridged if ``S[s, s]`` is singular."""
    cov = np.asarray(cov, dtype=float)
    s = list(subset)
    if not s:
        return float(np.trace(cov))
    Sss = cov[np.ix_(s, s)]
    Sxs = cov[:, s]
    try:
        L = np.linalg.cholesky(Sss)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(Sss + 1e-8 * np.eye(len(s)))
    V = np.linalg.solve(L, Sxs.T)
    return float(np.trace(cov) - np.sum(V * V))


def select_propagation_subset(cov, p: int, forced: int | None = None, exhaustive_max: int = 12) -> tuple:
    """Indices of ``p`` members that best explain the rest (min conditional trace).

    ``forced`` (e.g. the delegate) is always included. Exhaustive for up to
    ``exhaustive_max`` members, greedy forward selection beyond.
    """
    cov = np.asarray(cov, dtype=float)
    m = cov.shape[0]
    if not 1 <= p <= m:
        raise ValueError(f"subset size {p} outside 1..{m}")
    base = [] if forced is None else [forced]
    pool = [i for i in range(m) if i != forced]
    need = p - len(base)
    if need <= 0:
        return tuple(sorted(base))
    if m <= exhaustive_max:
        best, best_val = None, np.inf
        for combo in itertools.combinations(pool, need):
            val = conditional_trace(cov, base + list(combo))
            if val < best_val - 1e-12:
                best, best_val = base + list(combo), val
        return tuple(sorted(best))
    chosen = list(base)
    for _ in range(need):
        vals = [(conditional_trace(cov, chosen + [c]), c) for c in pool if c not in chosen]
        chosen.append(min(vals)[1])
    return tuple(sorted(chosen))


@dataclass(frozen=True, eq=False)
class TopCovariance:
    """Covariance of the top-level amplitudes, block-diagonal by factor.

    ``columns[k]`` lists the assets carried in the factor-``k`` block
    ``blocks[k]``.
    """

    columns: tuple
    blocks: tuple

    @property
    def pairs(self) -> list[tuple[str, int]]:
        return [(a, k + 1) for k, cols in enumerate(self.columns) for a in cols]

    def matrix(self) -> np.ndarray:
        n = sum(len(c) for c in self.columns)
        out = np.zeros((n, n))
        i = 0
        for b in self.blocks:
            j = i + b.shape[0]
            out[i:j, i:j] = b
            i = j
        return out

    def to_dict(self) -> dict:
        return {"columns": [list(c) for c in self.columns], "blocks": [b.tolist() for b in self.blocks]}

    @classmethod
    def from_dict(cls, d) -> "TopCovariance":
        return cls(tuple(tuple(c) for c in d["columns"]),
                   tuple(np.asarray(b, dtype=float).reshape(len(c), len(c)) for b, c in zip(d["blocks"], d["columns"])))


def top_covariance(members: Sequence[str], amplitudes: Mapping[str, Amplitudes], k_keep: int = 2,
                   min_days: int = MIN_COMMON_DAYS) -> TopCovariance:
    """Covariance of the first ``k_keep`` amplitudes of the top-level members.

    Different factor indices are uncorrelated by construction; each
    same-factor block is repaired through its correlation matrix.
    """
    members = list(members)
    amps = [amplitudes[m] for m in members]
    rows = align(amps, min_days) if len(amps) > 1 else [np.arange(amps[0].days.size)]
    if rows[0].size < min_days:
        raise CorrelationError(f"only {rows[0].size} days for {members[0]} (need {min_days})")
    columns, blocks = [], []
    for k in range(k_keep):
        have = [i for i, a in enumerate(amps) if k < a.n_factors]
        x = _factor_matrix([amps[i] for i in have], [rows[i] for i in have], k)
        cov = np.atleast_2d(np.cov(x, rowvar=False))
        columns.append(tuple(members[i] for i in have))
        blocks.append(repair_covariance(cov))
    return TopCovariance(tuple(columns), tuple(blocks))


@dataclass(frozen=True, eq=False)
class CorrelationBundle:
    """Everything the simulator needs beyond the per-asset calibrations."""

    k_keep: int
    p: int
    hierarchies: tuple
    clusters: dict  # (kind, level, cluster_id) -> ClusterCorr
    subsets: dict  # (kind, level, cluster_id) -> member ids propagated upward
    top: TopCovariance

    def contributing(self, kind: str, level: int, cluster_id: str) -> tuple:
        cc = self.clusters.get((kind, level, cluster_id))
        return cc.members if cc is not None else (cluster_id,)

    def top_members(self) -> list[str]:
        out = []
        for h in self.hierarchies:
            for cid in h.top.delegates:
                out.extend(self.contributing(h.kind, h.top.level, cid))
        return out

    def to_dict(self) -> dict:
        return {"k_keep": self.k_keep, "p": self.p,
                "hierarchies": [h.to_dict() for h in self.hierarchies],
                "clusters": [c.to_dict() for _, c in sorted(self.clusters.items())],
                "top": self.top.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "CorrelationBundle":
        clusters = {}
        subsets = {}
        for c in map(ClusterCorr.from_dict, d["clusters"]):
            clusters[(c.kind, c.level, c.cluster_id)] = c
            subsets[(c.kind, c.level, c.cluster_id)] = c.subset
        hier = tuple(Hierarchy.from_dict(h) for h in d["hierarchies"])
        for h in hier:
            for cid in h.levels[0].delegates:
                subsets[(h.kind, 1, cid)] = (cid,)
        return cls(int(d["k_keep"]), int(d["p"]), hier, clusters, subsets, TopCovariance.from_dict(d["top"]))


def build_correlations(hierarchies: Sequence[Hierarchy], amplitudes: Mapping[str, Amplitudes],
                       k_keep: int = 2, p: int = 2, min_days: int = MIN_COMMON_DAYS) -> CorrelationBundle:
    """Bottom-up pass: each cluster correlates the propagation subsets of
    its children and passes its own subset (delegate included) upward."""
    clusters, subsets = {}, {}
    for h in hierarchies:
        for cid in h.levels[0].delegates:
            subsets[(h.kind, 1, cid)] = (cid,)
        for part in h.levels[1:]:
            for members, delegate in zip(part.clusters, part.delegates):
                contrib = sorted({a for child in members for a in subsets[(h.kind, part.level - 1, child)]})
                A = cluster_correlations(contrib, amplitudes, k_keep, min_days)
                sub = select_propagation_subset(A[0], min(p, len(contrib)), contrib.index(delegate))
                chosen = tuple(contrib[i] for i in sub)
                clusters[(h.kind, part.level, delegate)] = ClusterCorr(
                    h.kind, part.level, delegate, tuple(contrib), A, chosen)
                subsets[(h.kind, part.level, delegate)] = chosen
    bundle = CorrelationBundle(k_keep, p, tuple(hierarchies), clusters, subsets, None)
    top = top_covariance(bundle.top_members(), amplitudes, k_keep, min_days)
    return CorrelationBundle(k_keep, p, tuple(hierarchies), clusters, subsets, top)
