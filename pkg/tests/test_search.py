import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgopt.errors import ConfigInvalid, MissingPrerequisite
from tgopt.partitions import Partition, sample_uniform_partition
from tgopt.search import (
    EvalCache,
    SearchConfig,
    accept_probability,
    evaluate_partition,
    random_search_baseline,
    search_with_predictor,
    write_result,
)

IDS = [f"t{k:02d}" for k in range(8)]
CLUSTER = {t: k % 2 for k, t in enumerate(IDS)}
STL = {t: 1.0 for t in IDS}


class PlantedTrainer:
    """Closed-form group loss: same-cluster mates help, strangers hurt."""

    def __init__(self):
        self.calls = 0

    def __call__(self, group):
        self.calls += 1
        per = {}
        for t in group:
            same = sum(CLUSTER[o] == CLUSTER[t] for o in group if o != t)
            other = len(group) - 1 - same
            per[t] = STL[t] * (1 - 0.1 * same + 0.15 * other) * 0.9
        return sum(per.values()), per


class ConstSurrogate:
    def __init__(self, value):
        self.value = value
        self.updates = 0

    def predict(self, partition, cache):
        return self.value

    def update(self, cache):
        self.updates += 1


class OracleSurrogate:
    """Predicts the true loss without spending trainings."""

    def __init__(self):
        self.t = PlantedTrainer()

    def predict(self, partition, cache):
        return sum(cache.loss(g) if g in cache else self.t(g)[0] for g in partition.groups)

    def update(self, cache):
        pass


def _sample(n, seed):
    rng = np.random.default_rng(seed)
    return [sample_uniform_partition(IDS, rng) for _ in range(n)]


def test_evaluate_partition_accounting():
    cache, tr = EvalCache(STL), PlantedTrainer()
    assert evaluate_partition(Partition.singletons(IDS), cache, tr) == 8.0
    assert cache.fresh == 0 and tr.calls == 0
    p = Partition.from_groups([IDS[:2], *([t] for t in IDS[2:])])
    evaluate_partition(p, cache, tr)
    assert cache.fresh == 1
    evaluate_partition(p, cache, tr)
    assert cache.fresh == 1 and tr.calls == 1


def test_cache_persistence(tmp_path):
    cache = EvalCache(STL, tmp_path / "c.json")
    evaluate_partition(Partition.from_groups([IDS[:4], IDS[4:]]), cache, PlantedTrainer())
    cache.flush()
    again = EvalCache(STL, tmp_path / "c.json")
    assert again.entries == cache.entries and again.fresh == 0
    before = again.loss(tuple(IDS[:4]))
    again.put(tuple(IDS[:4]), 99.0, {})
    assert again.loss(tuple(IDS[:4])) == before


def test_accept_probability_examples():
    assert accept_probability(10, 10, 1) == 1.0
    assert accept_probability(10, 9, 1) == 1.0
    assert abs(accept_probability(10, 11, 1) - math.exp(-1)) <= 1e-12
    with pytest.raises(ConfigInvalid):
        accept_probability(1, 2, 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
def test_accept_probability_property(L, L_new, K):
    p = accept_probability(L, L_new, K)
    if L_new <= L:
        assert p == 1.0
    else:
        assert 0.0 <= p <= 1.0
        assert p == math.exp((L - L_new) * K)


def test_search_config_validation_and_schedule():
    with pytest.raises(ConfigInvalid):
        SearchConfig(gamma_retrain=0)
    with pytest.raises(ConfigInvalid):
        SearchConfig(pi_t_start=0.01, pi_t_end=0.1)
    c = SearchConfig(gamma_max=11)
    assert c.pi_at(0) == 0.1 and math.isclose(c.pi_at(10), 0.01)


def test_gamma_zero_returns_best_of_sample():
    sample = _sample(10, 0)
    cache = EvalCache(STL)
    r = search_with_predictor(sample, cache, PlantedTrainer(), SearchConfig(gamma_max=0))
    losses = [evaluate_partition(p, EvalCache(STL), PlantedTrainer()) for p in sample]
    assert r.best_loss == min(losses) and r.trace == []
    with pytest.raises(MissingPrerequisite):
        search_with_predictor([], cache, PlantedTrainer(), SearchConfig())


def test_pi_one_with_pessimistic_surrogate_equals_plain_search():
    cfg = SearchConfig(gamma_max=60, pi_t_start=1.0, pi_t_end=1.0, seed=3)
    a = search_with_predictor(_sample(5, 1), EvalCache(STL), PlantedTrainer(), cfg, ConstSurrogate(math.inf))
    b = search_with_predictor(_sample(5, 1), EvalCache(STL), PlantedTrainer(), cfg, None)
    strip = lambda tr: [(r.mutated_partition, r.trained, r.true_loss, r.accepted, r.best_so_far) for r in tr]
    assert strip(a.trace) == strip(b.trace) and a.best == b.best


def test_trace_invariants_and_quick_reject_audit():
    r = search_with_predictor(_sample(10, 2), EvalCache(STL), PlantedTrainer(),
                              SearchConfig(gamma_max=200, seed=1), OracleSurrogate())
    best = [t.best_so_far for t in r.trace]
    assert all(x >= y for x, y in zip(best, best[1:]))
    for t in r.trace:
        assert t.trained == (t.true_loss is not None)
    # every mutation predicted to improve on the current state was trained
    state_loss = min(loss for _, loss in r.evaluated[:10])
    for t in r.trace:
        if t.predicted_loss < state_loss:
            assert t.trained
        if t.accepted:
            state_loss = t.true_loss
    assert r.best_loss == min(loss for _, loss in r.evaluated)


def test_search_finds_planted_clusters():
    truth = Partition.from_groups([IDS[0::2], IDS[1::2]])
    truth_loss = evaluate_partition(truth, EvalCache(STL), PlantedTrainer())
    r = search_with_predictor(_sample(10, 0), EvalCache(STL), PlantedTrainer(),
                              SearchConfig(gamma_max=400, seed=0), OracleSurrogate())
    assert r.best_loss <= truth_loss + 1e-12


def test_accurate_surrogate_saves_trainings():
    cfg = SearchConfig(gamma_max=200, seed=5)
    quick = search_with_predictor(_sample(10, 5), EvalCache(STL), PlantedTrainer(), cfg, OracleSurrogate())
    full = search_with_predictor(_sample(10, 5), EvalCache(STL), PlantedTrainer(),
                                 SearchConfig(gamma_max=200, seed=5, pi_t_start=1, pi_t_end=1),
                                 OracleSurrogate())
    assert quick.fresh_trainings <= 0.5 * full.fresh_trainings


def test_budget_is_a_hard_stop():
    cache = EvalCache(STL)
    r = search_with_predictor(_sample(5, 4), cache, PlantedTrainer(),
                              SearchConfig(gamma_max=500, budget_mtl=25, seed=0))
    assert r.fresh_trainings <= 25 or r.trace == []
    assert r.stopped_by_budget


def test_surrogate_refreshed_every_gamma_retrain():
    s = ConstSurrogate(0.0)
    search_with_predictor(_sample(3, 0), EvalCache(STL), PlantedTrainer(),
                          SearchConfig(gamma_max=20, gamma_retrain=5), s)
    assert s.updates == 1 + 4


def test_random_search_budget_rules():
    cache = EvalCache(STL)
    r = random_search_baseline(IDS, cache, PlantedTrainer(), 0, seed=0)
    assert r.best == Partition.singletons(IDS) and r.fresh_trainings == 0
    r = random_search_baseline(IDS, EvalCache(STL), PlantedTrainer(), 30, seed=1)
    assert r.fresh_trainings >= 30 and r.best_loss <= 8.0


def test_result_json(tmp_path):
    r = search_with_predictor(_sample(3, 0), EvalCache(STL), PlantedTrainer(), SearchConfig(gamma_max=5))
    write_result(r, tmp_path / "result.json", {"schema_version": 1})
    doc = json.loads((tmp_path / "result.json").read_text())
    assert set(doc) == {"schema_version", "best_partition", "total_loss", "mtl_trainings", "wall_seconds"}
    assert doc["wall_seconds"] is None
    assert Partition.from_json(doc["best_partition"]) == r.best
