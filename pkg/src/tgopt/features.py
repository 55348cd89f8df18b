"""Pairwise-task and groupwise-task affinity features.

Pair features combine target statistics, single-task learning-curve
descriptors, sample-distance statistics and two quantities read from the
all-task MTL model (lookahead affinity and head-vector dot products).

Naming: ``_nS`` is normalized by the sum of the two per-task parts,
``_nP`` is the squared value normalized by their product.  Denominators are
floored at ``EPS``.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .data import NormalizationStats, Task
from .errors import MissingPairGain, NonBinaryForHamming, ZeroVariance
from .stl import StlResult

EPS = 1e-12
DISTANCE_CAP = 512
CURVE_POINTS = (0.1, 0.2, 0.3, 0.5, 0.7)
METRICS = {"E": "euclidean", "M": "cityblock", "H": "hamming"}


def _pct(x: float) -> str:
    return f"{int(round(x * 100))}"


def _ratio(num: float, den: float) -> float:
    return num / max(den, EPS)


def is_binary(X: np.ndarray) -> bool:
    return bool(np.all((X == 0) | (X == 1)))


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def _cap_rows(X: np.ndarray, cap: int, seed: int) -> np.ndarray:
    if cap is None or X.shape[0] <= cap:
        return X
    idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], size=cap, replace=False))
    return X[idx]


def _metric_name(kind: str) -> str:
    kind = kind[0].upper() if kind.lower() not in METRICS.values() else kind
    return METRICS.get(kind, kind)


def _features(t) -> np.ndarray:
    return t.features if isinstance(t, Task) else np.asarray(t, dtype=float)


def avg_within_distance(task, kind: str = "E", cap: int | None = DISTANCE_CAP, seed: int = 0) -> float:
    """Mean distance over all unordered pairs of rows of one sample.

    ``kind`` is ``"E"`` (Euclidean), ``"M"`` (Manhattan) or ``"H"``
    (Hamming, as the fraction of differing coordinates).  Samples larger than
    ``cap`` are replaced by a seeded uniform subsample of ``cap`` rows.
    """
    X = _features(task)
    name = _metric_name(kind)
    if name == "hamming" and not is_binary(X):
        raise NonBinaryForHamming("Hamming distance needs 0/1 features")
    X = _cap_rows(X, cap, seed)
    if X.shape[0] < 2:
        return 0.0
    return float(pdist(X, name).mean())


def avg_between_distance(ti, tj, kind: str = "E", cap: int | None = DISTANCE_CAP, seed: int = 0) -> float:
    """Mean distance over all cross pairs (one row from each sample)."""
    A, B = _features(ti), _features(tj)
    name = _metric_name(kind)
    if name == "hamming" and not (is_binary(A) and is_binary(B)):
        raise NonBinaryForHamming("Hamming distance needs 0/1 features")
    A, B = _cap_rows(A, cap, seed), _cap_rows(B, cap, seed + 1)
    return float(cdist(A, B, name).mean())


def avg_combined_distance(ti, tj, kind: str = "E", cap: int | None = DISTANCE_CAP, seed: int = 0) -> float:
    """Within-sample mean distance of the union of both samples."""
    return avg_within_distance(np.vstack([_features(ti), _features(tj)]), kind, cap, seed)


# ---------------------------------------------------------------------------
# pair catalog
# ---------------------------------------------------------------------------


def _single_names() -> list:
    base = ["D", "target_sigma", "target_var", "stl_loss"]
    base += [f"curve_grad_{_pct(x)}" for x in CURVE_POINTS]
    base += ["fit_a", "fit_b"]
    return base


def _distance_names(metric: str, scaled: bool) -> list:
    tag = f"d{metric}" + ("_scaled" if scaled else "")
    names = [f"{tag}_within_i", f"{tag}_within_j", f"{tag}_between",
             f"{tag}_between_nS", f"{tag}_between_nP"]
    if not scaled:
        names.append(f"{tag}_combined")
    names += [f"{tag}_combined_nS", f"{tag}_combined_nP"]
    return names


def pair_feature_names(binary: bool = False) -> list:
    """Canonical column order of the pair catalog.

    70 names for real-valued features, 64 for binary features.
    """
    names = []
    for s in _single_names():
        names += [f"{s}_i", f"{s}_j"]
    names += [
        "D_diff_nS",
        "target_sigma_mean", "target_sigma_diff_nS", "target_sigma_comb_nS", "target_sigma_comb_nP",
        "target_var_mean", "target_var_diff_nS", "target_var_comb_nS", "target_var_comb_nP",
    ]
    names += [f"curve_grad_diff_{_pct(x)}" for x in CURVE_POINTS]
    names += ["fit_a_diff_nS", "fit_b_diff_nS", "inter_task_affinity", "w_dot"]
    if binary:
        for m in ("E", "M", "H"):
            names += _distance_names(m, scaled=False)
    else:
        for m in ("E", "M"):
            names += _distance_names(m, scaled=False)
        for m in ("E", "M"):
            names += _distance_names(m, scaled=True)
    return names


@dataclass(frozen=True)
class PairFeatures:
    task_i: str
    task_j: str
    values: dict

    def vector(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = names or list(self.values)
        return np.array([self.values[n] for n in names], dtype=float)

    def __getitem__(self, name):
        return self.values[name]


def _diff_ns(a: float, b: float) -> float:
    return _ratio(abs(a - b), abs(a) + abs(b))


def _distance_block(Xi, Xj, metric, scaled, cap, seed, cache=None, keys=None) -> dict:
    tag = f"d{metric}" + ("_scaled" if scaled else "")

    def within(X, key):
        if cache is not None and key is not None:
            ck = (key, metric, scaled)
            if ck not in cache:
                cache[ck] = avg_within_distance(X, metric, cap, seed)
            return cache[ck]
        return avg_within_distance(X, metric, cap, seed)

    wi = within(Xi, keys[0] if keys else None)
    wj = within(Xj, keys[1] if keys else None)
    btw = avg_between_distance(Xi, Xj, metric, cap, seed)
    comb = avg_combined_distance(Xi, Xj, metric, cap, seed)
    out = {
        f"{tag}_within_i": wi,
        f"{tag}_within_j": wj,
        f"{tag}_between": btw,
        f"{tag}_between_nS": _ratio(btw, wi + wj),
        f"{tag}_between_nP": _ratio(btw * btw, wi * wj),
    }
    if not scaled:
        out[f"{tag}_combined"] = comb
    out[f"{tag}_combined_nS"] = _ratio(comb, wi + wj)
    out[f"{tag}_combined_nP"] = _ratio(comb * comb, wi * wj)
    return out


def pair_features(
    ti: Task,
    tj: Task,
    stl_i: StlResult,
    stl_j: StlResult,
    z: float = 0.0,
    w_dot: float = 0.0,
    norm: NormalizationStats | None = None,
    binary: bool | None = None,
    cap: int | None = DISTANCE_CAP,
    seed: int = 0,
    within_cache: dict | None = None,
) -> PairFeatures:
    """Every entry of the pair catalog for tasks ``ti`` and ``tj``.

    ``ti``/``tj`` are the training samples in their original units.  Scaled
    distance variants use ``norm`` (z-scoring pooled over the whole task
    set) and are produced only for real-valued features.  ``z`` is the
    symmetrized lookahead affinity and ``w_dot`` the head-vector dot product
    from the all-task MTL model.
    """
    if binary is None:
        binary = is_binary(ti.features) and is_binary(tj.features)
    yi, yj = ti.targets, tj.targets
    yc = np.concatenate([yi, yj])
    si, sj, sc = float(np.std(yi)), float(np.std(yj)), float(np.std(yc))
    vi, vj, vc = si * si, sj * sj, sc * sc
    Di, Dj = ti.n_samples, tj.n_samples

    v = {}
    singles_i = _singles(Di, si, vi, stl_i)
    singles_j = _singles(Dj, sj, vj, stl_j)
    for name in _single_names():
        v[f"{name}_i"] = singles_i[name]
        v[f"{name}_j"] = singles_j[name]
    v["D_diff_nS"] = _ratio(abs(Di - Dj), Di + Dj)
    v["target_sigma_mean"] = 0.5 * (si + sj)
    v["target_sigma_diff_nS"] = _ratio(abs(si - sj), si + sj)
    v["target_sigma_comb_nS"] = _ratio(sc, si + sj)
    v["target_sigma_comb_nP"] = _ratio(sc * sc, si * sj)
    v["target_var_mean"] = 0.5 * (vi + vj)
    v["target_var_diff_nS"] = _ratio(abs(vi - vj), vi + vj)
    v["target_var_comb_nS"] = _ratio(vc, vi + vj)
    v["target_var_comb_nP"] = _ratio(vc * vc, vi * vj)
    for x in CURVE_POINTS:
        v[f"curve_grad_diff_{_pct(x)}"] = _diff_ns(singles_i[f"curve_grad_{_pct(x)}"],
                                                   singles_j[f"curve_grad_{_pct(x)}"])
    v["fit_a_diff_nS"] = _diff_ns(stl_i.fit_a, stl_j.fit_a)
    v["fit_b_diff_nS"] = _diff_ns(stl_i.fit_b, stl_j.fit_b)
    v["inter_task_affinity"] = float(z)
    v["w_dot"] = float(w_dot)

    keys = (ti.id, tj.id)
    Xi, Xj = ti.features, tj.features
    metrics = ("E", "M", "H") if binary else ("E", "M")
    for m in metrics:
        v.update(_distance_block(Xi, Xj, m, False, cap, seed, within_cache, keys))
    if not binary:
        if norm is None:
            from .data import feature_stats, TaskSet
            norm = feature_stats(TaskSet((ti, tj)))
        Zi, Zj = norm.apply(Xi), norm.apply(Xj)
        for m in ("E", "M"):
            v.update(_distance_block(Zi, Zj, m, True, cap, seed, within_cache, keys))

    ordered = {n: v[n] for n in pair_feature_names(binary)}
    return PairFeatures(ti.id, tj.id, ordered)


def _singles(D, sigma, var, stl: StlResult) -> dict:
    out = {"D": float(D), "target_sigma": sigma, "target_var": var, "stl_loss": stl.final_loss}
    for x in CURVE_POINTS:
        out[f"curve_grad_{_pct(x)}"] = _curve_grad(stl, x)
    out["fit_a"] = stl.fit_a
    out["fit_b"] = stl.fit_b
    return out


def _curve_grad(stl: StlResult, x: float) -> float:
    for k, g in stl.curve_grads.items():
        if abs(k - x) < 1e-9:
            return float(g)
    from .stl import curve_gradient
    return curve_gradient(stl.curve, x)


def write_feature_table(rows: Sequence[PairFeatures], path, schema_path=None) -> None:
    """CSV with one row per pair; optional JSON schema of the column order."""
    if not rows:
        raise ValueError("no rows to write")
    names = list(rows[0].values)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_i", "task_j", *names])
        for r in rows:
            w.writerow([r.task_i, r.task_j, *(repr(float(r.values[n])) for n in names)])
    if schema_path is not None:
        Path(schema_path).write_text(json.dumps({"features": names, "count": len(names)}, indent=2))


# ---------------------------------------------------------------------------
# groups
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSummary:
    """Per-task statistics and the task-to-task distance used for groups."""

    ids: tuple
    sample_size: np.ndarray
    target_var: np.ndarray
    target_sigma: np.ndarray
    distance: np.ndarray

    def index(self, ids) -> np.ndarray:
        pos = {t: k for k, t in enumerate(self.ids)}
        return np.array([pos[t] for t in ids], dtype=int)


def summarize_tasks(tasks: Sequence[Task], kind: str | None = None,
                    cap: int | None = DISTANCE_CAP, seed: int = 0) -> TaskSummary:
    """Statistics for group features; distance defaults to Euclidean, Hamming for 0/1 data."""
    tasks = list(tasks)
    if kind is None:
        kind = "H" if all(is_binary(t.features) for t in tasks) else "E"
    n = len(tasks)
    dist = np.zeros((n, n))
    for a, b in itertools.combinations(range(n), 2):
        dist[a, b] = dist[b, a] = avg_between_distance(tasks[a], tasks[b], kind, cap, seed)
    sig = np.array([float(np.std(t.targets)) for t in tasks])
    return TaskSummary(
        ids=tuple(t.id for t in tasks),
        sample_size=np.array([t.n_samples for t in tasks], dtype=float),
        target_var=sig * sig,
        target_sigma=sig,
        distance=dist,
    )


@dataclass(frozen=True)
class GroupFeatures:
    n_tasks: float
    mean_sample_size: float
    mean_target_var: float
    mean_target_sigma: float
    mean_group_distance: float
    pair_gain_mean: float
    pair_gain_var: float
    pair_gain_std: float
    pair_wdot_mean: float

    @classmethod
    def names(cls) -> list:
        return [f.name for f in fields(cls)]

    def vector(self, names: Sequence[str] | None = None) -> np.ndarray:
        return np.array([getattr(self, n) for n in (names or self.names())], dtype=float)

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in self.names()}


def group_features(group: Sequence[str], pair_gains: np.ndarray, wdots: np.ndarray,
                   summary: TaskSummary) -> GroupFeatures:
    """Means and spreads over the C(k, 2) task pairs of a group (population variance)."""
    idx = summary.index(group)
    k = len(idx)
    if k < 3:
        raise ValueError("group features are defined for groups of at least 3 tasks")
    a, b = np.triu_indices(k, 1)
    ia, ib = idx[a], idx[b]
    gains = pair_gains[ia, ib]
    if np.any(~np.isfinite(gains)):
        bad = [(summary.ids[x], summary.ids[y]) for x, y, g in zip(ia, ib, gains) if not np.isfinite(g)]
        raise MissingPairGain(f"pair gains missing for {bad[:3]}")
    var = float(np.mean((gains - gains.mean()) ** 2))
    return GroupFeatures(
        n_tasks=float(k),
        mean_sample_size=float(summary.sample_size[idx].mean()),
        mean_target_var=float(summary.target_var[idx].mean()),
        mean_target_sigma=float(summary.target_sigma[idx].mean()),
        mean_group_distance=float(summary.distance[ia, ib].mean()),
        pair_gain_mean=float(gains.mean()),
        pair_gain_var=var,
        pair_gain_std=math.sqrt(var),
        pair_wdot_mean=float(wdots[ia, ib].mean()),
    )


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ZeroVariance("pearson correlation is undefined for a constant vector")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))
