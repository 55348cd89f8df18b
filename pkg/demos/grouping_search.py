#!/usr/bin/env python3
"""
Grouping search on a small synthetic task set with planted clusters.

Nine regression tasks come from three hidden clusters.  We train one model
per task, every pair of tasks, and the all-task model, then let the
predictor-guided local search look for a good grouping and compare it with
random search under the same training budget.  Takes a minute or two.
"""

import itertools

import numpy as np

from tgopt.data import SplitSpec, split_taskset, synth_taskset
from tgopt.features import summarize_tasks
from tgopt.mtl import MtlArch, train_mtl
from tgopt.nn import TrainConfig
from tgopt.partitions import bell_number, sample_uniform_partition
from tgopt.predictor import AffinityContext, PredictorConfig
from tgopt.search import (
    EvalCache,
    GainSurrogate,
    MtlTrainer,
    SearchConfig,
    evaluate_partition,
    random_search_baseline,
    search_with_predictor,
)
from tgopt.stl import run_stl

SEED = 1
ts, planted = synth_taskset(9, 3, 6, 80, 0.1, SEED)
ids = list(ts.ids)
print(f"{ts.n} tasks, {bell_number(ts.n)} possible groupings")
print("planted:", planted)

arch = MtlArch(shared_widths=(6,), learning_rate=1e-2)
cfg = TrainConfig(epochs=60, seed=SEED)
splits = split_taskset(ts, SplitSpec(seed=SEED))

# single-task baselines
stl = {t: run_stl(splits[t], arch.stl_spec(ts.d), cfg).final_loss for t in ids}
print(f"sum of single-task losses: {sum(stl.values()):.3f}")

# pairwise gains
trainer = MtlTrainer(splits, arch, cfg)
cache = EvalCache(stl)
gains = np.zeros((ts.n, ts.n))
for i, j in itertools.combinations(range(ts.n), 2):
    pair = (ids[i], ids[j])
    loss, per = trainer(pair)
    cache.put(pair, loss, per)
    gains[i, j] = gains[j, i] = 1 - loss / (stl[ids[i]] + stl[ids[j]])
print("mean pairwise gain inside planted clusters vs across:")
same = [gains[i, j] for i, j in itertools.combinations(range(ts.n), 2)
        if planted.group_of(ids[i]) == planted.group_of(ids[j])]
cross = [gains[i, j] for i, j in itertools.combinations(range(ts.n), 2)
         if planted.group_of(ids[i]) != planted.group_of(ids[j])]
print(f"  {np.mean(same):+.3f} vs {np.mean(cross):+.3f}")

# the all-task model supplies head vectors for the group features
full = train_mtl([splits[t] for t in ids], arch, cfg)
cache.put(tuple(ids), full.total_loss, full.per_task_loss)
V = np.stack([full.task_vectors[t] for t in ids])
context = AffinityContext(stl, gains, V @ V.T, summarize_tasks([splits[t].train for t in ids]))

rng = np.random.default_rng(SEED)
sample = [sample_uniform_partition(ids, rng) for _ in range(25)]
result = search_with_predictor(sample, cache, trainer, SearchConfig(gamma_max=600, seed=SEED, budget_mtl=150),
                               GainSurrogate(context, PredictorConfig(seed=SEED)))
trained = sum(r.trained for r in result.trace)
print(f"\nsearch: {len(result.trace)} moves, {trained} trained, {result.fresh_trainings} trainings in total")
print(f"  best {result.best}  loss {result.best_loss:.3f}")

planted_loss = evaluate_partition(planted, EvalCache(stl), trainer)
rand = random_search_baseline(ids, EvalCache(stl), trainer, result.fresh_trainings, seed=SEED)
print(f"planted grouping loss  {planted_loss:.3f}")
print(f"all tasks together     {full.total_loss:.3f}")
print(f"random search (same budget) {rand.best_loss:.3f}")
