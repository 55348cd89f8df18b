"""Partition search: evaluation cache, predictor-guided local search, random search.

The search state is a :class:`~tgopt.partitions.Partition`.  Evaluating a
partition trains one MTL model per uncached group of two or more tasks; the
:class:`EvalCache` remembers every trained group and counts fresh trainings,
which is the unit of search cost.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ConfigInvalid, MissingPrerequisite, TooFewRecords
from .mtl import MtlArch, MtlResult, group_key, train_mtl
from .nn import TrainConfig
from .partitions import Partition, mutate_groups, sample_uniform_partition
from .predictor import (
    AffinityContext,
    PredictorConfig,
    PredictorModel,
    predict_partition_loss,
    train_predictor,
    update_predictor,
)

Trainer = Callable[[tuple], tuple]  # group -> (total_loss, {task: loss})


class EvalCache:
    """Trained group -> (total loss, per-task losses).

    Singleton groups are answered from the STL losses and never count as
    trainings.  ``fresh`` counts trainings performed through this cache.
    """

    def __init__(self, stl_losses: dict, path=None):
        self.stl_losses = dict(stl_losses)
        self.entries: dict = {}
        self.fresh = 0
        self.path = None if path is None else Path(path)
        if self.path is not None and self.path.exists():
            self._read()

    def __contains__(self, group) -> bool:
        key = tuple(group)
        return len(key) == 1 or key in self.entries

    def __len__(self):
        return len(self.entries)

    def loss(self, group) -> float:
        key = tuple(group)
        if len(key) == 1:
            return float(self.stl_losses[key[0]])
        return self.entries[key][0]

    def per_task(self, group) -> dict:
        key = tuple(group)
        if len(key) == 1:
            return {key[0]: float(self.stl_losses[key[0]])}
        return dict(self.entries[key][1])

    def put(self, group, total: float, per_task: dict, fresh: bool = True) -> None:
        key = group_key(group)
        if key in self.entries:
            return
        self.entries[key] = (float(total), {t: float(v) for t, v in per_task.items()})
        if fresh:
            self.fresh += 1

    def missing(self, partition: Partition) -> list:
        return [g for g in partition.groups if g not in self]

    def groups(self, min_size: int = 2):
        return [g for g in self.entries if len(g) >= min_size]

    # persistence
    def to_json(self) -> dict:
        return {
            "stl_losses": self.stl_losses,
            "entries": [{"group": list(g), "total": t, "per_task": p}
                        for g, (t, p) in sorted(self.entries.items())],
        }

    def _read(self):
        doc = json.loads(self.path.read_text())
        for e in doc["entries"]:
            self.entries[tuple(e["group"])] = (e["total"], dict(e["per_task"]))

    def flush(self) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(self.path, json.dumps(self.to_json(), indent=1))


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


class MtlTrainer:
    """Trains groups with :func:`train_mtl`.

    ``memo`` may be shared between runs: training is a deterministic function
    of the group, so a memo hit returns exactly what retraining would.  Each
    :class:`EvalCache` still counts the group as its own fresh training.
    """

    def __init__(self, splits: dict, arch: MtlArch, config: TrainConfig, memo: dict | None = None,
                 augment_size: int | None = None):
        self.splits = splits
        self.arch = arch
        self.config = config
        self.memo = {} if memo is None else memo
        self.augment_size = augment_size
        self.calls = 0

    def result(self, group) -> MtlResult:
        key = group_key(group)
        res = self.memo.get(key)
        if res is None:
            self.calls += 1
            res = train_mtl([self.splits[t] for t in key], self.arch, self.config,
                            augment_size=self.augment_size)
            self.memo[key] = res
        return res

    def __call__(self, group) -> tuple:
        res = self.result(group)
        return res.total_loss, res.per_task_loss


def evaluate_partition(p: Partition, cache: EvalCache, trainer: Trainer) -> float:
    """Total loss of ``p``; trains (and caches) every group not seen before."""
    total = 0.0
    for g in p.groups:
        if g not in cache:
            loss_value, per_task = trainer(g)
            cache.put(g, loss_value, per_task)
        total += cache.loss(g)
    return total


def accept_probability(L: float, L_new: float, K: float) -> float:
    """``min(1, exp((L - L_new) * K))``."""
    if not K > 0:
        raise ConfigInvalid("K must be positive")
    x = (L - L_new) * K
    return 1.0 if x >= 0 else math.exp(x)


# ---------------------------------------------------------------------------
# configuration and trace
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    gamma_max: int = 500
    gamma_retrain: int = 5
    K: float | None = None  # default 10 / sum(STL)
    pi_t_start: float = 0.1
    pi_t_end: float = 0.01
    seed: int = 0
    budget_mtl: int | None = None
    start_rank: int = 1

    def __post_init__(self):
        if self.gamma_max < 0:
            raise ConfigInvalid("gamma_max must be >= 0")
        if self.gamma_retrain < 1:
            raise ConfigInvalid("gamma_retrain must be >= 1")
        if self.K is not None and not self.K > 0:
            raise ConfigInvalid("K must be positive")
        if not 0 < self.pi_t_start <= 1 or not 0 <= self.pi_t_end <= self.pi_t_start:
            raise ConfigInvalid("need 0 <= pi_t_end <= pi_t_start <= 1 and pi_t_start > 0")
        if self.budget_mtl is not None and self.budget_mtl < 0:
            raise ConfigInvalid("budget must be >= 0")
        if self.start_rank < 1:
            raise ConfigInvalid("start_rank is 1-based")

    def pi_at(self, it: int) -> float:
        if self.gamma_max <= 1:
            return self.pi_t_start
        frac = it / (self.gamma_max - 1)
        return self.pi_t_start + (self.pi_t_end - self.pi_t_start) * frac

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, doc: dict) -> "SearchConfig":
        return cls(**doc)


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    mutated_partition: Partition
    predicted_loss: float | None
    trained: bool
    true_loss: float | None
    accepted: bool
    best_so_far: float
    fresh_trainings: int

    def to_json(self) -> dict:
        pred = self.predicted_loss
        return {
            "iteration": self.iteration,
            "mutated_partition": self.mutated_partition.to_json(),
            "predicted_loss": pred if pred is not None and math.isfinite(pred) else None,
            "trained": self.trained,
            "true_loss": self.true_loss,
            "accepted": self.accepted,
            "best_so_far": self.best_so_far,
            "fresh_trainings": self.fresh_trainings,
        }


@dataclass
class SearchResult:
    best: Partition
    best_loss: float
    trace: list
    evaluated: list  # (partition, loss) in evaluation order
    fresh_trainings: int
    stopped_by_budget: bool = False
    wall_seconds: float = 0.0

    def result_json(self, include_wall: bool = False) -> dict:
        return {
            "best_partition": self.best.to_json(),
            "total_loss": self.best_loss,
            "mtl_trainings": self.fresh_trainings,
            "wall_seconds": self.wall_seconds if include_wall else None,
        }


# ---------------------------------------------------------------------------
# surrogates
# ---------------------------------------------------------------------------


class LossSurrogate(Protocol):
    def predict(self, partition: Partition, cache: EvalCache) -> float: ...

    def update(self, cache: EvalCache) -> None: ...


class GainSurrogate:
    """Wraps the groupwise gain predictor as a partition-loss estimator.

    Until at least ``MIN_RECORDS`` groups of three or more tasks have been
    trained, no model exists and partitions that need one are estimated at
    ``-inf`` (always trained).
    """

    def __init__(self, context: AffinityContext, config: PredictorConfig = PredictorConfig(),
                 model: PredictorModel | None = None):
        self.context = context
        self.config = config
        self.model = model
        self._seen = model.trained_on if model is not None else 0
        self.updates = 0

    def records(self, cache: EvalCache) -> list:
        return [self.context.record(g, cache.loss(g)) for g in sorted(cache.groups(3))]

    def update(self, cache: EvalCache) -> None:
        recs = self.records(cache)
        if len(recs) == self._seen:
            return
        try:
            if self.model is None:
                self.model = train_predictor(recs, self.config)
            else:
                self.model = update_predictor(self.model, recs, self.config)
        except TooFewRecords:
            return
        self._seen = len(recs)
        self.updates += 1

    def predict(self, partition: Partition, cache: EvalCache) -> float:
        try:
            return predict_partition_loss(self.model, partition, self.context, cache)
        except MissingPrerequisite:
            if self.model is None:
                return -math.inf
            raise


# ---------------------------------------------------------------------------
# the search
# ---------------------------------------------------------------------------


def rank_sample(sample: Sequence[Partition], cache: EvalCache, trainer: Trainer) -> list:
    """Evaluate the sample; ``[(loss, partition)]`` sorted best first (stable)."""
    scored = [(evaluate_partition(p, cache, trainer), k, p) for k, p in enumerate(sample)]
    scored.sort(key=lambda x: (x[0], x[1]))
    return [(loss_value, p) for loss_value, _, p in scored]


def search_with_predictor(
    sample: Sequence[Partition],
    cache: EvalCache,
    trainer: Trainer,
    config: SearchConfig,
    surrogate: LossSurrogate | None = None,
    trace_path=None,
) -> SearchResult:
    """Randomized local search over partitions with quick reject.

    Starting from the ``config.start_rank``-th best partition of ``sample``,
    each iteration moves one task.  A mutation is trained when the surrogate
    predicts it beats the current loss, and otherwise only with probability
    ``pi_t``.  Trained mutations are accepted with probability
    ``min(1, exp((L - L') * K))``.  The surrogate is refreshed every
    ``gamma_retrain`` iterations.  Without a surrogate every mutation is
    trained (plain randomized search).  Returns the best partition evaluated.
    """
    t0 = time.perf_counter()
    if not sample:
        raise MissingPrerequisite("the search needs a non-empty partition sample")
    tasks = list(sample[0].tasks)
    ranked = rank_sample(sample, cache, trainer)
    evaluated = [(p, loss_value) for loss_value, p in ranked]
    start = ranked[min(config.start_rank, len(ranked)) - 1]
    L, G = start
    best_loss, best = ranked[0]
    stl_sum = sum(cache.stl_losses[t] for t in tasks)
    K = config.K if config.K is not None else 10.0 / stl_sum
    rng = np.random.default_rng(config.seed)
    trace = []
    fh = None if trace_path is None else Path(trace_path).open("w")
    stopped = False
    if surrogate is not None:
        surrogate.update(cache)
    try:
        for it in range(config.gamma_max):
            pi = config.pi_at(it)
            G_new = mutate_groups(G, tasks, rng)
            pred = surrogate.predict(G_new, cache) if surrogate is not None else None
            u = rng.random()
            train = pred is None or pred < L or u < pi
            true_loss, accepted = None, False
            if train:
                need = len(cache.missing(G_new))
                if config.budget_mtl is not None and cache.fresh + need > config.budget_mtl:
                    stopped = True
                    break
                true_loss = evaluate_partition(G_new, cache, trainer)
                evaluated.append((G_new, true_loss))
                if true_loss < best_loss:
                    best, best_loss = G_new, true_loss
                accepted = rng.random() < accept_probability(L, true_loss, K)
                if accepted:
                    G, L = G_new, true_loss
            if surrogate is not None and (it + 1) % config.gamma_retrain == 0:
                surrogate.update(cache)
            rec = TraceRecord(it, G_new, pred, train, true_loss, accepted, best_loss, cache.fresh)
            trace.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec.to_json()) + "\n")
    finally:
        if fh is not None:
            fh.close()
    return SearchResult(best, best_loss, trace, evaluated, cache.fresh, stopped,
                        time.perf_counter() - t0)


def random_search_baseline(tasks: Sequence[str], cache: EvalCache, trainer: Trainer,
                           budget_mtl: int, seed: int = 0, max_draws: int | None = None) -> SearchResult:
    """Uniform random partitions until ``budget_mtl`` fresh trainings are used.

    The last partition may overshoot the budget so the baseline never spends
    less than the method it is compared with.  Budget 0 returns the
    all-singletons partition.
    """
    t0 = time.perf_counter()
    tasks = sorted(tasks)
    best = Partition.singletons(tasks)
    best_loss = evaluate_partition(best, cache, trainer)
    evaluated = [(best, best_loss)]
    rng = np.random.default_rng(seed)
    draws = 0
    cap = max_draws if max_draws is not None else 1000 + 100 * budget_mtl
    while cache.fresh < budget_mtl and draws < cap:
        p = sample_uniform_partition(tasks, rng)
        draws += 1
        loss_value = evaluate_partition(p, cache, trainer)
        evaluated.append((p, loss_value))
        if loss_value < best_loss:
            best, best_loss = p, loss_value
    return SearchResult(best, best_loss, [], evaluated, cache.fresh, False, time.perf_counter() - t0)


def write_result(result: SearchResult, path, header: dict | None = None, include_wall: bool = False) -> None:
    doc = dict(header or {})
    doc.update(result.result_json(include_wall))
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
