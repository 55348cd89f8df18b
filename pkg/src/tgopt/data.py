"""Multi-task tabular datasets: loading, validation, normalization, augmentation.

A :class:`TaskSet` is an ordered collection of supervised tasks that share a
feature dimension and a task kind.  Arrays are stored as read-only float64
numpy arrays so that tasks can be shared freely between models and threads.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyFile,
    InconsistentDimensions,
    InvalidSpec,
    MissingColumn,
    NonNumericCell,
    TaskTooSmall,
    TooFewSamples,
    DataError,
)

SCHEMA_VERSION = 1


class TaskKind(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Task:
    id: str
    features: np.ndarray
    targets: np.ndarray
    kind: TaskKind = TaskKind.REGRESSION

    def __post_init__(self):
        X = _frozen(self.features)
        y = _frozen(self.targets).reshape(-1)
        if X.ndim != 2:
            raise InconsistentDimensions(f"task {self.id!r}: features must be 2-D, got {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise InconsistentDimensions(
                f"task {self.id!r}: {X.shape[0]} feature rows but {y.shape[0]} targets"
            )
        if X.shape[1] < 1:
            raise InconsistentDimensions(f"task {self.id!r}: no feature columns")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError(f"task {self.id!r} contains non-finite values")
        kind = TaskKind(self.kind)
        if kind is TaskKind.CLASSIFICATION and not np.all((y == 0) | (y == 1)):
            raise DataError(f"task {self.id!r}: classification targets must be in {{0, 1}}")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "kind", kind)

    @property
    def n_samples(self) -> int:
        return int(self.targets.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def take(self, rows) -> "Task":
        rows = np.asarray(rows, dtype=np.intp)
        return Task(self.id, self.features[rows], self.targets[rows], self.kind)


@dataclass(frozen=True, eq=False)
class TaskSet:
    tasks: tuple
    kind: TaskKind = field(default=None)
    d: int = field(default=None)

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if len(tasks) < 2:
            raise DataError(f"a TaskSet needs at least 2 tasks, got {len(tasks)}")
        ids = [t.id for t in tasks]
        if len(set(ids)) != len(ids):
            raise DataError("task ids must be unique")
        dims = {t.d for t in tasks}
        if len(dims) != 1:
            raise InconsistentDimensions(f"feature dimensions differ across tasks: {sorted(dims)}")
        kinds = {t.kind for t in tasks}
        if len(kinds) != 1:
            raise DataError("all tasks in a TaskSet must share one kind")
        for t in tasks:
            if t.n_samples < 2:
                raise TaskTooSmall(t.id, t.n_samples)
        kind = kinds.pop()
        if self.kind is not None and TaskKind(self.kind) is not kind:
            raise DataError(f"declared kind {self.kind} does not match tasks ({kind})")
        object.__setattr__(self, "tasks", tasks)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "d", dims.pop())

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def n(self) -> int:
        return len(self.tasks)

    @property
    def ids(self) -> tuple:
        return tuple(t.id for t in self.tasks)

    def by_id(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)

    def subset(self, ids: Iterable[str]) -> "TaskSet":
        lookup = {t.id: t for t in self.tasks}
        return TaskSet(tuple(lookup[i] for i in ids))

    def map(self, fn) -> "TaskSet":
        return TaskSet(tuple(fn(t) for t in self.tasks))


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return self.std == 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        safe = np.where(self.constant, 1.0, self.std)
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / safe
        Z[:, self.constant] = 0.0
        return Z

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "NormalizationStats":
        return cls(np.asarray(doc["mean"], dtype=float), np.asarray(doc["std"], dtype=float))


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    val_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if min(fr) <= 0:
            raise InvalidSpec("split fractions must be positive")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise InvalidSpec(f"split fractions must sum to 1, got {sum(fr)!r}")


@dataclass(frozen=True, eq=False)
class TaskSplit:
    """Train/validation/test views of one task."""

    train: Task
    val: Task
    test: Task

    @property
    def id(self) -> str:
        return self.train.id


# ---------------------------------------------------------------------------
# loading and saving
# ---------------------------------------------------------------------------


def _infer_kind(targets: Iterable[float]) -> TaskKind:
    vals = set(targets)
    return TaskKind.CLASSIFICATION if vals <= {0.0, 1.0} else TaskKind.REGRESSION


def load_taskset(
    path,
    task_col: str = "task_id",
    target_col: str = "target",
    kind: TaskKind | str | None = None,
) -> TaskSet:
    """Read a CSV file with one row per sample into a :class:`TaskSet`.

    Every column other than ``task_col`` and ``target_col`` is a numeric
    feature.  Tasks appear in order of first occurrence and rows keep their
    file order.  The task kind is inferred from the targets (all in {0, 1}
    means classification) unless given explicitly.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path} is empty") from None
        header = [h.strip() for h in header]
        for col in (task_col, target_col):
            if col not in header:
                raise MissingColumn(col)
        ti, yi = header.index(task_col), header.index(target_col)
        feat_idx = [k for k in range(len(header)) if k not in (ti, yi)]
        if not feat_idx:
            raise InconsistentDimensions("no feature columns present")

        rows: dict[str, list] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise InconsistentDimensions(
                    f"row {lineno} has {len(rec)} cells, header has {len(header)}"
                )
            vals = []
            for k in feat_idx + [yi]:
                try:
                    vals.append(float(rec[k]))
                except ValueError:
                    raise NonNumericCell(lineno, header[k], rec[k]) from None
            rows.setdefault(rec[ti].strip(), []).append(vals)

    if not rows:
        raise EmptyFile(f"{path} has a header but no data rows")
    if kind is None:
        kind = _infer_kind(v[-1] for block in rows.values() for v in block)
    kind = TaskKind(kind)
    tasks = []
    for tid, block in rows.items():
        if len(block) < 2:
            raise TaskTooSmall(tid, len(block))
        arr = np.asarray(block, dtype=np.float64)
        tasks.append(Task(tid, arr[:, :-1], arr[:, -1], kind))
    return TaskSet(tuple(tasks))


def save_taskset_csv(ts: TaskSet, path, feature_names: Sequence[str] | None = None) -> None:
    names = list(feature_names) if feature_names else [f"x{k}" for k in range(ts.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", *names, "target"])
        for t in ts:
            for x, y in zip(t.features, t.targets):
                w.writerow([t.id, *map(repr, x.tolist()), repr(float(y))])


def taskset_to_json(ts: TaskSet) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": ts.kind.value,
        "d": ts.d,
        "tasks": [
            {"id": t.id, "features": t.features.tolist(), "targets": t.targets.tolist()}
            for t in ts
        ],
    }


def taskset_from_json(doc: dict) -> TaskSet:
    kind = TaskKind(doc["kind"])
    tasks = tuple(
        Task(rec["id"], np.asarray(rec["features"], dtype=float).reshape(-1, doc["d"]),
             rec["targets"], kind)
        for rec in doc["tasks"]
    )
    return TaskSet(tasks)


def save_taskset_json(ts: TaskSet, path) -> None:
    Path(path).write_text(json.dumps(taskset_to_json(ts)))


def load_taskset_json(path) -> TaskSet:
    return taskset_from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def feature_stats(ts: TaskSet) -> NormalizationStats:
    X = np.vstack([t.features for t in ts])
    return NormalizationStats(X.mean(axis=0), X.std(axis=0))


def normalize_features(ts: TaskSet, stats: NormalizationStats | None = None):
    """Z-score every attribute with mean/std pooled over all tasks.

    Population standard deviation is used; constant attributes map to 0.
    Returns the normalized set and the statistics that produced it.
    """
    if stats is None:
        stats = feature_stats(ts)
    out = ts.map(lambda t: Task(t.id, stats.apply(t.features), t.targets, t.kind))
    return out, stats


def cyclic_rows(n: int, size: int) -> np.ndarray:
    return np.arange(size) % n


def augment_to_max(ts: TaskSet, size: int | None = None) -> TaskSet:
    """Repeat each task's rows cyclically up to the largest task size."""
    if size is None:
        size = max(t.n_samples for t in ts)
    return ts.map(lambda t: t if t.n_samples == size else t.take(cyclic_rows(t.n_samples, size)))


def _task_seed(seed: int, task_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(task_id.encode())])


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    if n * min(spec.train_frac, spec.val_frac, spec.test_frac) < 1 - 1e-9:
        raise TooFewSamples(f"{n} rows cannot be split with fractions "
                            f"({spec.train_frac}, {spec.val_frac}, {spec.test_frac})")
    n_val = math.floor(n * spec.val_frac + 1e-9)
    n_test = math.floor(n * spec.test_frac + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_task(t: Task, spec: SplitSpec) -> TaskSplit:
    """Seeded disjoint holdout split; leftover rows after flooring go to train."""
    n_train, n_val, _ = split_sizes(t.n_samples, spec)
    perm = np.random.default_rng(_task_seed(spec.seed, t.id)).permutation(t.n_samples)
    return TaskSplit(
        t.take(perm[:n_train]),
        t.take(perm[n_train:n_train + n_val]),
        t.take(perm[n_train + n_val:]),
    )


def split_taskset(ts: TaskSet, spec: SplitSpec) -> dict:
    return {t.id: split_task(t, spec) for t in ts}


def kfold_indices(n: int, k: int, seed: int = 0):
    """Yield (train_idx, test_idx) pairs for seeded k-fold cross-validation."""
    if k < 2 or k > n:
        raise TooFewSamples(f"cannot make {k} folds from {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    for fold in np.array_split(perm, k):
        yield np.setdiff1d(perm, fold, assume_unique=True), fold


# ---------------------------------------------------------------------------
# synthetic data with known grouping
# ---------------------------------------------------------------------------


def synth_taskset(
    n_tasks: int,
    n_clusters: int,
    d: int,
    samples_per_task: int,
    noise: float,
    seed: int,
    hidden: int = 4,
):
    """Tasks drawn from ``n_clusters`` latent generators.

    Each cluster owns a generator ``f(x) = tanh(x W) a + x v``; tasks in a
    cluster share it and differ only in their input draws and observation
    noise.  Task ``k`` belongs to cluster ``k % n_clusters``.

    Returns ``(taskset, true_partition)``.
    """
    from .partitions import Partition

    if not (1 <= n_clusters <= n_tasks) or n_tasks < 2:
        raise InvalidSpec("need 2 <= n_tasks and 1 <= n_clusters <= n_tasks")
    if noise < 0 or d < 1 or samples_per_task < 2:
        raise InvalidSpec("noise must be >= 0, d >= 1, samples_per_task >= 2")
    rng = np.random.default_rng(seed)
    gens = []
    for _ in range(n_clusters):
        W = rng.normal(size=(d, hidden)) * (1.5 / np.sqrt(d))
        a = rng.normal(size=hidden)
        v = rng.normal(size=d) * (0.5 / np.sqrt(d))
        gens.append((W, a, v))
    width = len(str(n_tasks - 1))
    tasks, members = [], [[] for _ in range(n_clusters)]
    for k in range(n_tasks):
        c = k % n_clusters
        W, a, v = gens[c]
        X = rng.normal(size=(samples_per_task, d))
        y = np.tanh(X @ W) @ a + X @ v + noise * rng.normal(size=samples_per_task)
        tid = f"t{k:0{width}d}"
        tasks.append(Task(tid, X, y, TaskKind.REGRESSION))
        members[c].append(tid)
    return TaskSet(tuple(tasks)), Partition.from_groups(members)


def cluster_mean_function(n_clusters: int, d: int, seed: int, hidden: int = 4):
    """Noise-free conditional mean functions used by :func:`synth_taskset`."""
    rng = np.random.default_rng(seed)
    fns = []
    for _ in range(n_clusters):
        W = rng.normal(size=(d, hidden)) * (1.5 / np.sqrt(d))
        a = rng.normal(size=hidden)
        v = rng.normal(size=d) * (0.5 / np.sqrt(d))
        fns.append(lambda X, W=W, a=a, v=v: np.tanh(X @ W) @ a + X @ v)
    return fns
