import math
import time
from dataclasses import replace

import numpy as np
import pytest

from tgopt.data import SplitSpec, split_taskset, synth_taskset
from tgopt.errors import MissingFeature, MissingPrerequisite, TooFewRecords, ZeroVariance
from tgopt.features import GroupFeatures, summarize_tasks
from tgopt.mtl import MtlArch, train_mtl
from tgopt.nn import TrainConfig
from tgopt.partitions import Partition
from tgopt.predictor import (
    AffinityContext,
    PredictorConfig,
    PredictorModel,
    TrainingRecord,
    dedup_records,
    gain_to_loss,
    loss_to_gain,
    predict_gain,
    predict_gains,
    predict_partition_loss,
    r_squared,
    train_predictor,
    update_predictor,
)
from tgopt.search import EvalCache

FAST = PredictorConfig(hidden=(16, 8), epochs=200, learning_rate=5e-3)


def _records(n, seed, gain_fn, start=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        v = rng.normal(size=9)
        gf = GroupFeatures(*v)
        group = (f"g{start + k}a", f"g{start + k}b", f"g{start + k}c")
        out.append(TrainingRecord(group, gf, float(gain_fn(v, rng))))
    return out


def _mse(model, records):
    X = np.array([r.features.vector() for r in records])
    y = np.array([r.observed_gain for r in records])
    return float(np.mean((predict_gains(model, X) - y) ** 2))


def test_constant_gain_fit():
    recs = _records(30, 0, lambda v, r: 0.37)
    m = train_predictor(recs, FAST)
    probe = np.random.default_rng(5).normal(size=(20, 9)) * 3
    assert np.all(np.abs(predict_gains(m, probe) - 0.37) < 1e-2)
    gf = GroupFeatures(*probe[0])
    assert predict_gain(m, gf) == predict_gain(m, gf)


def test_too_few_records_and_dedup():
    recs = _records(9, 0, lambda v, r: v[0])
    with pytest.raises(TooFewRecords):
        train_predictor(recs, FAST)
    recs = _records(12, 1, lambda v, r: v[0])
    a = train_predictor(recs, FAST)
    b = train_predictor(recs + recs, FAST)
    assert np.array_equal(a.params.flatten(), b.params.flatten()) and b.trained_on == 12
    newer = replace(recs[0], observed_gain=9.0)
    kept = dedup_records(recs + [newer])
    assert len(kept) == 12 and newer in kept


def test_record_needs_three_tasks():
    with pytest.raises(ValueError):
        TrainingRecord(("a", "b"), GroupFeatures(*np.zeros(9)), 0.1)


def test_linear_signal_is_learned():
    w = np.random.default_rng(7).normal(size=9) * 0.1
    fn = lambda v, r: float(v @ w + 0.01 * r.normal())
    train, test = _records(300, 1, fn), _records(100, 2, fn, start=1000)
    m = train_predictor(train, PredictorConfig(epochs=200))
    X = np.array([r.features.vector() for r in test])
    assert r_squared(predict_gains(m, X), [r.observed_gain for r in test]) >= 0.9


def test_model_json_round_trip(tmp_path):
    m = train_predictor(_records(15, 3, lambda v, r: v[1]), FAST)
    m.save(tmp_path / "p.json")
    back = PredictorModel.load(tmp_path / "p.json")
    X = np.random.default_rng(0).normal(size=(4, 9))
    assert np.array_equal(predict_gains(m, X), predict_gains(back, X))
    assert set(m.to_json()) >= {"feature_names", "norm_stats", "net"}


def test_predict_gain_missing_feature():
    m = train_predictor(_records(15, 3, lambda v, r: v[1]), FAST)
    with pytest.raises(MissingFeature):
        predict_gain(m, {"n_tasks": 3.0})
    with pytest.raises(MissingFeature):
        predict_gains(m, np.zeros((1, 4)))


def test_update_without_new_records_does_not_hurt_and_grows():
    drops, grows = [], []
    for seed in range(10):
        fn = lambda v, r: float(np.tanh(v[0] - v[2]))
        recs = _records(40, seed, fn)
        cfg = replace(FAST, epochs=20, seed=seed)
        m = train_predictor(recs, cfg)
        m2 = update_predictor(m, recs, cfg)
        drops.append(_mse(m, recs) - _mse(m2, recs))
        more = recs + _records(20, seed + 100, fn, start=500)
        m3 = update_predictor(m, more, cfg)
        grows.append(_mse(m, more) - _mse(m3, more))
        assert m3.trained_on == 60 >= m.trained_on
    assert np.median(drops) >= 0 and np.median(grows) >= 0


def test_cold_update_matches_fresh_training():
    recs = _records(20, 4, lambda v, r: v[3])
    m = train_predictor(recs[:12], FAST)
    cold = replace(FAST, warm_start=False)
    assert np.array_equal(update_predictor(m, recs, cold).params.flatten(),
                          train_predictor(recs, cold).params.flatten())


def test_r_squared_examples():
    y = np.array([1.0, 2.0, 4.0, 7.0])
    assert r_squared(y, y) == 1.0
    assert r_squared(np.full(4, y.mean()), y) == 0.0
    assert r_squared(-y, y) < 0
    pred = np.array([1.5, 2.5, 3.0, 6.0])
    sse = sum((a - b) ** 2 for a, b in zip(y, pred))
    sst = sum((a - y.mean()) ** 2 for a in y)
    assert abs(r_squared(pred, y) - (1 - sse / sst)) <= 1e-12
    with pytest.raises(ZeroVariance):
        r_squared([1, 2], [3, 3])


def test_gain_loss_duality():
    assert gain_to_loss(0.2, 10.0) == 8.0
    for g in (-0.4, 0.0, 0.13, 0.9):
        assert math.isclose(loss_to_gain(gain_to_loss(g, 3.7), 3.7), g, abs_tol=1e-15)


# -- partition estimates -------------------------------------------------------------


def _context(n=5, seed=0):
    ts, _ = synth_taskset(n, 1, 2, 10, 0.1, seed)
    ids = list(ts.ids)
    stl = {t: 1.0 + k for k, t in enumerate(ids)}
    G = np.full((n, n), 0.2)
    np.fill_diagonal(G, 0)
    return ids, stl, AffinityContext(stl, G, np.zeros((n, n)), summarize_tasks(list(ts)))


def test_partition_loss_rules():
    ids, stl, ctx = _context()
    assert predict_partition_loss(None, Partition.singletons(ids), ctx) == sum(stl.values())
    p = Partition.from_groups([ids[:2], *([t] for t in ids[2:])])
    expect = 0.8 * (stl[ids[0]] + stl[ids[1]]) + sum(stl[t] for t in ids[2:])
    assert math.isclose(predict_partition_loss(None, p, ctx), expect)
    with pytest.raises(MissingPrerequisite):
        predict_partition_loss(None, Partition.from_groups([ids[:3], ids[3:]]), ctx)


def test_partition_loss_uses_predictor_and_cache():
    ids, stl, ctx = _context()
    model = train_predictor(_records(12, 0, lambda v, r: 0.5), FAST)
    p = Partition.from_groups([ids[:3], ids[3:]])
    g3 = predict_gains(model, [ctx.group_features(ids[:3])])[0]
    expect = (1 - g3) * sum(stl[t] for t in ids[:3]) + 0.8 * sum(stl[t] for t in ids[3:])
    assert math.isclose(predict_partition_loss(model, p, ctx), expect, rel_tol=1e-12)
    cache = EvalCache(stl)
    cache.put(tuple(ids[:3]), 1.25, {t: 1.25 / 3 for t in ids[:3]})
    cache.put(tuple(ids[3:]), 2.5, {t: 1.25 for t in ids[3:]})
    assert predict_partition_loss(model, p, ctx, cache) == 3.75


def test_missing_pair_gain_is_reported():
    ids, stl, ctx = _context()
    ctx.pair_gains[0, 1] = ctx.pair_gains[1, 0] = np.nan
    with pytest.raises(MissingPrerequisite):
        predict_partition_loss(None, Partition.from_groups([ids[:2], ids[2:3], ids[3:4], ids[4:]]), ctx)


def test_query_is_cheap_next_to_training():
    ts, _ = synth_taskset(2, 1, 8, 200, 0.1, 0)
    sp = split_taskset(ts, SplitSpec())
    t0 = time.perf_counter()
    train_mtl(list(sp.values()), MtlArch(shared_widths=(16,)), TrainConfig(epochs=60, seed=0))
    mtl_time = time.perf_counter() - t0
    model = train_predictor(_records(20, 0, lambda v, r: v[0]), PredictorConfig(epochs=5))
    X = np.random.default_rng(0).normal(size=(100, 9))
    predict_gains(model, X)
    t0 = time.perf_counter()
    predict_gains(model, X)
    assert time.perf_counter() - t0 < 0.01 * mtl_time
