"""Set partitions of a task set: representation, counting, sampling, mutation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import InvalidSpec, OutOfRange


@dataclass(frozen=True)
class Partition:
    """Disjoint cover of a task set.

    ``groups`` is canonical: each group is a sorted tuple of task ids and the
    groups are ordered by their first element, so equal partitions compare
    and hash equal.
    """

    groups: tuple

    def __post_init__(self):
        groups = tuple(sorted((tuple(sorted(g)) for g in self.groups), key=lambda g: g[0] if g else ""))
        seen = set()
        for g in groups:
            if not g:
                raise InvalidSpec("empty group in partition")
            if len(set(g)) != len(g) or seen.intersection(g):
                raise InvalidSpec(f"task repeated across groups: {g}")
            seen.update(g)
        object.__setattr__(self, "groups", groups)

    @classmethod
    def from_groups(cls, groups: Iterable[Iterable[str]]) -> "Partition":
        return cls(tuple(tuple(g) for g in groups))

    @classmethod
    def singletons(cls, ids: Iterable[str]) -> "Partition":
        return cls(tuple((i,) for i in ids))

    @classmethod
    def from_labels(cls, ids: Sequence[str], labels: Sequence[int]) -> "Partition":
        blocks: dict = {}
        for i, lab in zip(ids, labels):
            blocks.setdefault(int(lab), []).append(i)
        return cls(tuple(tuple(b) for b in blocks.values()))

    @property
    def tasks(self) -> tuple:
        return tuple(sorted(t for g in self.groups for t in g))

    def __len__(self):
        return len(self.groups)

    def __iter__(self):
        return iter(self.groups)

    def group_of(self, task: str) -> tuple:
        for g in self.groups:
            if task in g:
                return g
        raise KeyError(task)

    def membership(self) -> dict:
        """Map task -> the set of other tasks in its group."""
        return {t: frozenset(g) - {t} for g in self.groups for t in g}

    def to_json(self) -> list:
        return [list(g) for g in self.groups]

    @classmethod
    def from_json(cls, doc) -> "Partition":
        return cls.from_groups(doc)

    def __str__(self):
        return "{" + ", ".join("{" + ",".join(g) + "}" for g in self.groups) + "}"


def is_valid_partition(p: Partition, tasks: Iterable[str]) -> bool:
    tasks = sorted(tasks)
    flat = [t for g in p.groups for t in g]
    return (
        all(len(g) > 0 for g in p.groups)
        and len(flat) == len(set(flat))
        and sorted(flat) == tasks
    )


def moved_tasks(a: Partition, b: Partition) -> set:
    """Tasks whose set of group-mates differs between ``a`` and ``b``."""
    ma, mb = a.membership(), b.membership()
    return {t for t in ma if ma[t] != mb.get(t)}


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------

_BELL_MAX = 512


def bell_number(n: int) -> int:
    """Exact Bell number via the Bell triangle."""
    if not 0 <= n <= _BELL_MAX:
        raise OutOfRange(f"bell_number supports 0 <= n <= {_BELL_MAX}, got {n}")
    if n == 0:
        return 1
    row = [1]
    for _ in range(n - 1):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[-1]


def enumerate_partitions(items: Sequence[str], limit: int = 12) -> Iterator[Partition]:
    """Every set partition of ``items`` (restricted growth strings)."""
    items = list(items)
    if len(items) > limit:
        raise OutOfRange(f"exhaustive enumeration is limited to {limit} items")
    n = len(items)
    if n == 0:
        yield Partition(())
        return

    def rec(i, labels, k):
        if i == n:
            yield Partition.from_labels(items, labels)
            return
        for lab in range(k + 1):
            labels.append(lab)
            yield from rec(i + 1, labels, max(k, lab + 1))
            labels.pop()

    yield from rec(0, [], 0)


# ---------------------------------------------------------------------------
# uniform sampling (Stam's urn method)
# ---------------------------------------------------------------------------


def _urn_count_weights(n: int) -> np.ndarray:
    """Normalized P(K = k) proportional to k**n / k! for k = 1, 2, ...

    Summed over all k these weights equal e * Bell(n); the series is cut once
    the remaining tail is below double precision.
    """
    logs = []
    k = 1
    peak = -math.inf
    while True:
        lw = n * math.log(k) - math.lgamma(k + 1)
        logs.append(lw)
        peak = max(peak, lw)
        if k > n and lw < peak - 40:
            break
        k += 1
    w = np.exp(np.asarray(logs) - peak)
    return w / w.sum()


_WEIGHT_CACHE: dict = {}


def sample_uniform_partition(ids, rng: np.random.Generator) -> Partition:
    """Draw a set partition uniformly from all Bell(n) partitions.

    Draw an urn count ``K`` with ``P(K=k) = k^n / (k! e B(n))``, throw every
    item into one of the ``K`` urns uniformly, and keep the non-empty urns.
    ``ids`` may be a task-id sequence or an integer ``n`` (ids ``0..n-1``).
    """
    if isinstance(ids, (int, np.integer)):
        ids = [str(i) for i in range(int(ids))]
    ids = list(ids)
    n = len(ids)
    if n < 1:
        raise InvalidSpec("need at least one item")
    w = _WEIGHT_CACHE.get(n)
    if w is None:
        w = _WEIGHT_CACHE[n] = np.cumsum(_urn_count_weights(n))
    k = int(np.searchsorted(w, rng.random() * w[-1], side="right")) + 1
    labels = rng.integers(0, k, size=n)
    return Partition.from_labels(ids, labels)


# ---------------------------------------------------------------------------
# local moves
# ---------------------------------------------------------------------------


def mutate_groups(p: Partition, tasks: Sequence[str] | None, rng: np.random.Generator) -> Partition:
    """Move one randomly chosen task to another group.

    If the task sits alone, its group disappears and the task joins one of
    the remaining groups.  Otherwise it leaves its group for either another
    existing group or a new singleton, chosen uniformly.
    """
    tasks = list(tasks) if tasks is not None else list(p.tasks)
    if len(tasks) < 2:
        raise InvalidSpec("mutation needs at least two tasks")
    t = tasks[int(rng.integers(len(tasks)))]
    groups = [list(g) for g in p.groups]
    old = next(i for i, g in enumerate(groups) if t in g)
    if len(groups[old]) == 1:
        rest = groups[:old] + groups[old + 1:]
        j = int(rng.integers(len(rest)))
        rest[j].append(t)
        return Partition.from_groups(rest)
    groups[old].remove(t)
    others = [i for i in range(len(groups)) if i != old]
    j = int(rng.integers(len(others) + 1))
    if j == len(others):
        groups.append([t])
    else:
        groups[others[j]].append(t)
    return Partition.from_groups(groups)
