import itertools

import numpy as np
import pytest
from scipy.cluster.hierarchy import fcluster, linkage as scipy_linkage
from scipy.spatial.distance import squareform
from sklearn.cluster import KMeans

from tgopt.clustering import (
    GainTransform,
    Linkage,
    agglomerate,
    elbow,
    gain_distance,
    hierarchical_baseline,
    kmeans,
    kmeans_baseline,
)
from tgopt.errors import DegenerateVectors, MissingPairGain
from tgopt.partitions import Partition

IDS = [f"t{k}" for k in range(6)]


def _blocks():
    G = np.full((6, 6), -0.5)
    for blk in ((0, 1, 2), (3, 4, 5)):
        for a, b in itertools.permutations(blk, 2):
            G[a, b] = 0.5
    np.fill_diagonal(G, 0)
    return G


def test_gain_distance_transforms():
    G = np.array([[0.0, 0.3], [0.3, 0.0]])
    assert np.isclose(gain_distance(G, GainTransform.EXPONENTIAL)[0, 1], np.exp(-0.3))
    assert np.isclose(gain_distance(G, GainTransform.LOGISTIC)[0, 1], 1 / (1 + np.exp(0.3)))
    assert np.all(np.diag(gain_distance(G, GainTransform.LOGISTIC)) == 0)
    assert np.all(gain_distance(np.zeros((3, 3)), GainTransform.EXPONENTIAL)[~np.eye(3, dtype=bool)] == 1)
    G[0, 1] = np.nan
    with pytest.raises(MissingPairGain):
        gain_distance(G, GainTransform.EXPONENTIAL)


@pytest.mark.parametrize("transform", list(GainTransform))
@pytest.mark.parametrize("link", list(Linkage))
def test_blocks_recovered(transform, link):
    p = hierarchical_baseline(_blocks(), IDS, transform, link, 2)
    assert p == Partition.from_groups([IDS[:3], IDS[3:]])


def test_k_extremes_and_ties():
    assert hierarchical_baseline(_blocks(), IDS, k=6) == Partition.singletons(IDS)
    assert hierarchical_baseline(_blocks(), IDS, k=1) == Partition.from_groups([IDS])
    flat = np.zeros((6, 6))
    a = hierarchical_baseline(flat, IDS, k=3)
    assert a == hierarchical_baseline(flat, IDS, k=3) and len(a) == 3
    # smallest id pair merges first
    assert ("t0", "t1") in [g[:2] for g in hierarchical_baseline(flat, IDS, k=5).groups]


@pytest.mark.parametrize("link", list(Linkage))
def test_agglomerate_matches_scipy(link):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        P = rng.normal(size=(9, 3))
        D = np.sqrt(((P[:, None] - P[None]) ** 2).sum(-1))
        Z = scipy_linkage(squareform(D, checks=False), method=link.value)
        for k in range(1, 10):
            ref = fcluster(Z, k, criterion="maxclust")
            ours = agglomerate(D, link, k)
            want = {frozenset(np.flatnonzero(ref == c)) for c in set(ref)}
            assert {frozenset(b) for b in ours} == want


def test_kmeans_two_clusters_and_singletons():
    rng = np.random.default_rng(0)
    vecs = {f"t{k}": rng.normal(scale=0.1, size=4) + (10 if k < 3 else -10) for k in range(6)}
    res = kmeans_baseline(vecs, range(2, 7), seed=0)
    assert res.partitions[2] == Partition.from_groups([IDS[:3], IDS[3:]])
    assert res.partitions[6] == Partition.singletons(IDS) and res.inertias[6] == 0
    assert res.elbow_k in res.partitions


def test_kmeans_duplicates_stay_together():
    vecs = {"a": [0.0, 0.0], "b": [0.0, 0.0], "c": [5.0, 5.0], "d": [9.0, 1.0]}
    p = kmeans_baseline(vecs, [2], seed=1).partitions[2]
    assert p.group_of("a") == p.group_of("b")
    with pytest.raises(DegenerateVectors):
        kmeans_baseline({"a": [1.0], "b": [1.0]}, [1])


def test_kmeans_inertia_close_to_sklearn():
    for seed in range(5):
        X = np.random.default_rng(seed).normal(size=(30, 3))
        _, _, ours = kmeans(X, 4, seed=seed, restarts=20)
        ref = KMeans(4, n_init=20, random_state=seed).fit(X).inertia_
        assert ours <= ref * 1.02


def test_elbow_rule():
    assert elbow([2, 3, 4, 5], [100.0, 20.0, 15.0, 12.0]) == 3
    assert elbow([2, 3], [5.0, 1.0]) == 2
