"""Simulated-annealing clustering of amplitude correlations and the
resulting multi-level hierarchy of delegates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numba
import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnnealParams:
    temp0: float = 1.0
    eta: float = 0.999
    steps_per_node2: int = 50  # L = steps_per_node2 * J^2
    restarts: int = 4
    max_cluster_size: int = 8

    def n_steps(self, J: int) -> int:
        return max(1, self.steps_per_node2 * J * J)


@dataclass(frozen=True)
class Partition:
    """Clusters of node ids at one hierarchy level.

    Clusters are sorted tuples, ordered by their delegate id for stable
    output; ``delegates[i]`` represents ``clusters[i]``.
    """

    level: int
    clusters: tuple
    delegates: tuple
    kappa: float = float("nan")

    def __post_init__(self):
        seen = set()
        for c, d in zip(self.clusters, self.delegates):
            if not c:
                raise ValueError("empty cluster")
            if d not in c:
                raise ValueError(f"delegate {d!r} not in its cluster")
            if seen.intersection(c):
                raise ValueError("clusters overlap")
            seen.update(c)

    @property
    def members(self) -> list:
        return sorted(m for c in self.clusters for m in c)

    def __len__(self):
        return len(self.clusters)

    def cluster_of(self, node) -> int:
        for i, c in enumerate(self.clusters):
            if node in c:
                return i
        raise KeyError(node)

    def to_dict(self) -> dict:
        return {"level": self.level, "kappa": self.kappa,
                "clusters": [{"delegate": d, "members": list(c)} for c, d in zip(self.clusters, self.delegates)]}

    @classmethod
    def from_dict(cls, d) -> "Partition":
        kappa = d.get("kappa")
        return cls(int(d["level"]), tuple(tuple(c["members"]) for c in d["clusters"]),
                   tuple(c["delegate"] for c in d["clusters"]), float("nan") if kappa is None else float(kappa))


# ---------------------------------------------------------------- energy


def _weights(rho) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    w = 1.0 - np.clip(rho, -1.0, 1.0) ** 2
    np.fill_diagonal(w, 0.0)
    return w


def energy(labels, rho, kappa: float) -> float:
    """Sum over clusters of ``1 + kappa/(|c|-1) * sum_{i<j in c} (1 - rho_ij^2)``.

    ``labels[i]`` is the cluster label of node ``i``; singletons score 1.
    """
    labels = np.asarray(labels)
    w = _weights(rho)
    total = 0.0
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        if idx.size == 1:
            total += 1.0
        else:
            total += 1.0 + kappa * np.triu(w[np.ix_(idx, idx)], 1).sum() / (idx.size - 1)
    return float(total)


@numba.njit(cache=True)
def accept_move(delta, temp, u):
    """Metropolis rule: always take improvements, else with prob ``exp(-delta/temp)``."""
    if delta <= 0.0:
        return True
    if temp <= 0.0:
        return False
    return u < math.exp(-delta / temp)


@numba.njit(cache=True)
def _term(size, pairsum, kappa):
    if size == 0:
        return 0.0
    if size == 1:
        return 1.0
    return 1.0 + kappa * pairsum / (size - 1)


@numba.njit(cache=True)
def _split_groups(members, absr):
    """Seed with the least-correlated pair, then attach each other member to
    the seed it is more correlated with. Returns a boolean 'goes to B' mask."""
    n = members.size
    best = 2.0
    a, b = 0, 1
    for x in range(n):
        for y in range(x + 1, n):
            r = absr[members[x], members[y]]
            if r < best:
                best = r
                a, b = x, y
    to_b = np.zeros(n, dtype=np.bool_)
    to_b[b] = True
    for x in range(n):
        if x == a or x == b:
            continue
        if absr[members[x], members[b]] > absr[members[x], members[a]]:
            to_b[x] = True
    return to_b


@numba.njit(cache=True)
def _anneal_kernel(w, absr, kappa, n_steps, temp0, eta, max_size, seed, labels0):
    np.random.seed(seed)
    J = w.shape[0]
    lab = labels0.copy()
    size = np.zeros(J, np.int64)
    for i in range(J):
        size[lab[i]] += 1
    # S[i, c] = sum of w[i, m] over members m of cluster c
    S = np.zeros((J, J))
    for i in range(J):
        for m in range(J):
            S[i, lab[m]] += w[i, m]
    psum = np.zeros(J)
    for i in range(J):
        psum[lab[i]] += 0.5 * S[i, lab[i]]
    E = 0.0
    for c in range(J):
        E += _term(size[c], psum[c], kappa)
    best_E = E
    best_lab = lab.copy()
    temp = temp0
    n_accepted = 0

    for step in range(n_steps):
        for attempt in range(20):
            if np.random.random() < 0.5:
                i = np.random.randint(J)
                j = np.random.randint(J)
                ci = lab[i]
                cj = lab[j]
                if ci == cj or size[cj] + 1 > max_size:
                    continue
                new_i = psum[ci] - S[i, ci]
                new_j = psum[cj] + S[i, cj]
                delta = (_term(size[ci] - 1, new_i, kappa) - _term(size[ci], psum[ci], kappa)
                         + _term(size[cj] + 1, new_j, kappa) - _term(size[cj], psum[cj], kappa))
                if accept_move(delta, temp, np.random.random()):
                    for m in range(J):
                        S[m, ci] -= w[m, i]
                        S[m, cj] += w[m, i]
                    psum[ci] = new_i
                    psum[cj] = new_j
                    size[ci] -= 1
                    size[cj] += 1
                    lab[i] = cj
                    E += delta
                    n_accepted += 1
                break
            else:
                i = np.random.randint(J)
                ci = lab[i]
                if size[ci] < 2:
                    continue
                members = np.empty(size[ci], np.int64)
                k = 0
                for m in range(J):
                    if lab[m] == ci:
                        members[k] = m
                        k += 1
                to_b = _split_groups(members, absr)
                pa = 0.0
                pb = 0.0
                na = 0
                for x in range(members.size):
                    if to_b[x]:
                        continue
                    na += 1
                    for y in range(x + 1, members.size):
                        if not to_b[y]:
                            pa += w[members[x], members[y]]
                for x in range(members.size):
                    if not to_b[x]:
                        continue
                    for y in range(x + 1, members.size):
                        if to_b[y]:
                            pb += w[members[x], members[y]]
                nb = members.size - na
                delta = _term(na, pa, kappa) + _term(nb, pb, kappa) - _term(size[ci], psum[ci], kappa)
                if accept_move(delta, temp, np.random.random()):
                    cb = 0
                    while size[cb] > 0:
                        cb += 1
                    for x in range(members.size):
                        if to_b[x]:
                            i2 = members[x]
                            for m in range(J):
                                S[m, ci] -= w[m, i2]
                                S[m, cb] += w[m, i2]
                            lab[i2] = cb
                    psum[ci] = pa
                    psum[cb] = pb
                    size[ci] = na
                    size[cb] = nb
                    E += delta
                    n_accepted += 1
                break
        temp *= eta
        if E < best_E - 1e-12:
            best_E = E
            best_lab[:] = lab
    return best_lab, best_E, lab, E, n_accepted


def _canonical(labels) -> np.ndarray:
    """Relabel clusters 0.. in order of first appearance."""
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv]


def anneal(rho, kappa: float, params: AnnealParams = AnnealParams(), rng=None, n_steps: int | None = None,
           squash: Callable | None = None, return_state: bool = False):
    """Best-of-``restarts`` annealing from the all-singleton start.

    Returns integer cluster labels (canonical order), or with
    ``return_state`` a dict that also carries the tracked final energy.
    """
    rho = np.asarray(rho, dtype=float)
    if squash is not None:
        rho = squash(rho)
    J = rho.shape[0]
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    rng = np.random.default_rng(rng)
    w = _weights(rho)
    absr = np.abs(rho)
    steps = params.n_steps(J) if n_steps is None else int(n_steps)
    best = None
    for _ in range(max(params.restarts, 1)):
        seed = int(rng.integers(0, 2**31 - 1))
        out = _anneal_kernel(w, absr, float(kappa), steps, float(params.temp0), float(params.eta),
                             int(params.max_cluster_size), seed, np.arange(J, dtype=np.int64))
        if best is None or out[1] < best[1] - 1e-12:
            best = out
    labels = _canonical(best[0])
    if return_state:
        return {"labels": labels, "energy": best[1], "final_labels": _canonical(best[2]),
                "final_energy": best[3], "accepted": best[4]}
    return labels


def tune_kappa(rho, target_reduction: float = 0.3, params: AnnealParams = AnnealParams(), rng=None,
               bounds=(1e-3, 1e3), max_steps: int = 12, tol: float = 0.05, accept_tol: float = 0.1,
               squash: Callable | None = None):
    """Bisection in ``log(kappa)`` so the cluster-count ratio hits ``target_reduction``.

    Larger ``kappa`` penalizes loose clusters and raises the count. Stops
    early once within ``tol``; if the best ratio misses by more than
    ``accept_tol`` a warning is logged. Returns ``(kappa, labels)``.
    """
    if not 0 < target_reduction <= 1:
        raise ValueError("target_reduction must lie in (0, 1]")
    rng = np.random.default_rng(rng)
    J = np.shape(rho)[0]
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    best = None
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        kappa = math.exp(mid)
        labels = anneal(rho, kappa, params, rng, squash=squash)
        ratio = (labels.max() + 1) / J
        err = abs(ratio - target_reduction)
        if best is None or err < best[0] - 1e-12:
            best = (err, kappa, labels, ratio)
        if err <= tol:
            break
        if ratio < target_reduction:
            lo = mid
        else:
            hi = mid
    if best[0] > accept_tol:
        logger.warning("cluster ratio target %.2f missed: best achieved %.3f", target_reduction, best[3])
    return best[1], best[2]


def select_delegate(cluster: Sequence, rho, ids: Sequence | None = None):
    """Member with the highest mean |rho| to the other members.

    ``cluster`` holds positions into ``rho``; ties go to the smallest id.
    Returns the winning position.
    """
    cluster = list(cluster)
    if not cluster:
        raise ValueError("empty cluster")
    if len(cluster) == 1:
        return cluster[0]
    rho = np.asarray(rho, dtype=float)
    sub = np.abs(rho[np.ix_(cluster, cluster)])
    np.fill_diagonal(sub, 0.0)
    score = sub.sum(axis=1) / (len(cluster) - 1)
    top = score.max()
    tied = [c for c, s in zip(cluster, score) if s >= top - 1e-12]
    key = (lambda c: ids[c]) if ids is not None else (lambda c: c)
    return min(tied, key=key)


def partition_from_labels(labels, rho, ids: Sequence, level: int, kappa: float = float("nan")) -> Partition:
    groups = {}
    for pos, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(pos)
    clusters, delegates = [], []
    for members in groups.values():
        d = select_delegate(members, rho, ids)
        clusters.append(tuple(sorted(ids[m] for m in members)))
        delegates.append(ids[d])
    order = np.argsort(delegates, kind="stable")
    return Partition(level, tuple(clusters[i] for i in order), tuple(delegates[i] for i in order), kappa)


@dataclass(frozen=True)
class Hierarchy:
    """Levels ``1..L`` for one asset kind; level 1 is all singletons and
    the nodes of level ``l`` are the delegates of level ``l - 1``."""

    kind: str
    levels: tuple

    @property
    def top(self) -> Partition:
        return self.levels[-1]

    def children(self, level: int, cluster_index: int) -> list:
        """Delegate ids (= level ``level-1`` cluster ids) inside a cluster."""
        return list(self.levels[level - 1].clusters[cluster_index])

    def level_sizes(self) -> list[int]:
        return [len(p) for p in self.levels]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "levels": [p.to_dict() for p in self.levels]}

    @classmethod
    def from_dict(cls, d) -> "Hierarchy":
        return cls(d["kind"], tuple(Partition.from_dict(p) for p in d["levels"]))


def correlation_matrix(series: np.ndarray) -> np.ndarray:
    """Pearson correlation of the columns; constant columns correlate 0."""
    x = np.asarray(series, dtype=float)
    x = x - x.mean(axis=0)
    sd = np.sqrt((x * x).sum(axis=0))
    safe = np.where(sd > 0, sd, 1.0)
    r = (x.T @ x) / np.outer(safe, safe)
    r[sd == 0, :] = 0.0
    r[:, sd == 0] = 0.0
    np.fill_diagonal(r, 1.0)
    return np.clip(r, -1.0, 1.0)


def build_hierarchy(gamma1: Mapping[str, np.ndarray], kind: str = "", target_reduction: float = 0.3,
                    top_cardinality: int = 3, params: AnnealParams = AnnealParams(), rng=None,
                    max_levels: int = 20, squash: Callable | None = None) -> Hierarchy:
    """Cluster delegates level by level until at most ``top_cardinality`` remain.

    ``gamma1`` maps asset id to its first-factor amplitude series on a
    common day index.
    """
    rng = np.random.default_rng(rng)
    ids = sorted(gamma1)
    if not ids:
        raise ValueError("no assets to cluster")
    levels = [Partition(1, tuple((i,) for i in ids), tuple(ids))]
    while len(levels[-1]) > top_cardinality and len(levels) < max_levels:
        nodes = list(levels[-1].delegates)
        rho = correlation_matrix(np.column_stack([gamma1[n] for n in nodes]))
        kappa, labels = tune_kappa(rho, target_reduction, params, rng, squash=squash)
        part = partition_from_labels(labels, rho, nodes, len(levels) + 1, kappa)
        if len(part) >= len(nodes):
            logger.warning("%s level %d: no reduction from %d nodes, stopping", kind, part.level, len(nodes))
            break
        logger.info("%s level %d: %d -> %d clusters (kappa=%.4g)", kind, part.level, len(nodes), len(part), kappa)
        levels.append(part)
    return Hierarchy(kind, tuple(levels))
