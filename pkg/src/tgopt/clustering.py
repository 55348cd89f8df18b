"""Clustering baselines for task grouping.

Agglomerative clustering works on a distance derived from pairwise MTL
gains (high gain -> small distance).  k-means clusters the output-head
vectors of the all-task model.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateVectors, InvalidSpec, MissingPairGain
from .partitions import Partition


class GainTransform(str, enum.Enum):
    EXPONENTIAL = "exponential"
    LOGISTIC = "logistic"


class Linkage(str, enum.Enum):
    SINGLE = "single"
    AVERAGE = "average"
    COMPLETE = "complete"


def gain_distance(pair_gains: np.ndarray, transform: GainTransform) -> np.ndarray:
    """``exp(-gain)`` or ``1 / (1 + exp(gain))``; the diagonal is set to 0."""
    G = np.asarray(pair_gains, dtype=float)
    off = ~np.eye(G.shape[0], dtype=bool)
    if np.any(~np.isfinite(G[off])):
        raise MissingPairGain("pair gain matrix has missing entries")
    if GainTransform(transform) is GainTransform.EXPONENTIAL:
        D = np.exp(-G)
    else:
        D = 0.5 * (1.0 - np.tanh(0.5 * G))  # 1/(1+e^g) without overflow
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def agglomerate(D: np.ndarray, linkage: Linkage, k: int) -> list:
    """Merge clusters until ``k`` remain; returns lists of item indices.

    Cluster distances are updated with the Lance-Williams rule.  Among equal
    distances the pair whose (smallest member, smallest member) is
    lexicographically smallest merges first.
    """
    n = D.shape[0]
    if not 1 <= k <= n:
        raise InvalidSpec(f"k must be in [1, {n}]")
    linkage = Linkage(linkage)
    clusters = {i: [i] for i in range(n)}
    dist = {(i, j): float(D[i, j]) for i in range(n) for j in range(i + 1, n)}
    while len(clusters) > k:
        a, b = min(dist, key=lambda p: (dist[p], p))
        na, nb = len(clusters[a]), len(clusters[b])
        merged = sorted(clusters[a] + clusters[b])
        del clusters[b]
        clusters[a] = merged
        dist.pop((a, b))
        for c in clusters:
            if c == a:
                continue
            dac = dist.pop((min(a, c), max(a, c)))
            dbc = dist.pop((min(b, c), max(b, c)))
            if linkage is Linkage.SINGLE:
                new = min(dac, dbc)
            elif linkage is Linkage.COMPLETE:
                new = max(dac, dbc)
            else:
                new = (na * dac + nb * dbc) / (na + nb)
            dist[(min(a, c), max(a, c))] = new
    # cluster labels are smallest members, so keys stay ordered by min element
    return [clusters[c] for c in sorted(clusters)]


def hierarchical_baseline(pair_gains: np.ndarray, ids: Sequence[str],
                          transform: GainTransform = GainTransform.EXPONENTIAL,
                          linkage: Linkage = Linkage.AVERAGE, k: int = 2) -> Partition:
    ids = list(ids)
    order = np.argsort(ids, kind="stable")
    D = gain_distance(pair_gains, transform)[np.ix_(order, order)]
    names = [ids[i] for i in order]
    blocks = agglomerate(D, linkage, k)
    return Partition.from_groups([[names[i] for i in b] for b in blocks])


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def _sq_dists(X, C):
    return np.maximum(((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2), 0.0)


def _kmeans_pp(X, k, rng):
    """Greedy k-means++: each new centre is the best of ``2 + ln k`` draws."""
    n = X.shape[0]
    trials = 2 + int(math.log(k))
    centers = [X[int(rng.integers(n))]]
    d2 = _sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            cand = rng.integers(n, size=trials)
        else:
            cand = np.searchsorted(np.cumsum(d2), rng.random(trials) * total, side="right")
            cand = np.minimum(cand, n - 1)
        pots = np.minimum(d2[None, :], _sq_dists(X, X[cand]).T)
        pick = int(np.argmin(pots.sum(axis=1)))
        centers.append(X[cand[pick]])
        d2 = pots[pick]
    return np.array(centers, dtype=float)


def lloyd(X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 300):
    """One k-means run from k-means++ seeds; returns (labels, centers, inertia)."""
    C = _kmeans_pp(X, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(X, C)
        new = d2.argmin(axis=1)
        # empty cluster: steal the point farthest from its centre
        for c in range(k):
            if not np.any(new == c):
                far = int(d2[np.arange(len(X)), new].argmax())
                new[far] = c
                d2[far] = 0.0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = np.array([X[labels == c].mean(axis=0) for c in range(k)])
    inertia = float(_sq_dists(X, C)[np.arange(len(X)), labels].sum())
    return labels, C, inertia


def kmeans(X: np.ndarray, k: int, seed: int = 0, restarts: int = 20):
    """Best-of-``restarts`` Lloyd runs by inertia."""
    X = np.asarray(X, dtype=float)
    if not 1 <= k <= X.shape[0]:
        raise InvalidSpec(f"k must be in [1, {X.shape[0]}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        out = lloyd(X, k, rng)
        if best is None or out[2] < best[2] - 1e-12:
            best = out
    return best


def elbow(ks: Sequence[int], inertias: Sequence[float]) -> int:
    """k with the largest second difference of inertia (ends excluded)."""
    ks, I = list(ks), np.asarray(inertias, dtype=float)
    if len(ks) < 3:
        return ks[0]
    second = I[:-2] - 2 * I[1:-1] + I[2:]
    return ks[1 + int(np.argmax(second))]


@dataclass(frozen=True)
class KMeansResult:
    partitions: dict  # k -> Partition
    inertias: dict  # k -> inertia
    elbow_k: int

    @property
    def best(self) -> Partition:
        return self.partitions[self.elbow_k]


def kmeans_baseline(task_vectors: dict, k_range: Sequence[int], seed: int = 0,
                    restarts: int = 20) -> KMeansResult:
    ids = sorted(task_vectors)
    X = np.stack([np.asarray(task_vectors[t], dtype=float) for t in ids])
    if np.all(X == X[0]):
        raise DegenerateVectors("all task vectors are identical")
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 1 or ks[-1] > len(ids):
        raise InvalidSpec(f"k range must lie in [1, {len(ids)}]")
    parts, inertia = {}, {}
    for k in ks:
        labels, _, I = kmeans(X, k, seed, restarts)
        parts[k] = Partition.from_labels(ids, labels)
        inertia[k] = I
    return KMeansResult(parts, inertia, elbow(ks, [inertia[k] for k in ks]))
