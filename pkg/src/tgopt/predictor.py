"""Neural-network predictor of the relative MTL gain of a task group.

The predictor maps groupwise features (see :mod:`tgopt.features`) to the
relative gain ``1 - L_group / sum(STL_group)``.  Inputs are z-scored with
statistics from the training records; targets are centred and scaled.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import NormalizationStats
from .errors import MissingFeature, MissingPairGain, MissingPrerequisite, TooFewRecords, ZeroVariance
from .features import GroupFeatures, TaskSummary, group_features
from .nn import Activation, NetSpec, Params, TrainConfig, forward, init_params, train
from .partitions import Partition

MIN_RECORDS = 10


@dataclass(frozen=True)
class PredictorConfig:
    hidden: tuple = (32, 16, 16, 8)
    hidden_activation: Activation = Activation.TANH
    learning_rate: float = 1.2e-3
    epochs: int = 200
    seed: int = 0
    warm_start: bool = True
    feature_names: tuple | None = None

    def spec(self, n_in: int) -> NetSpec:
        return NetSpec((n_in, *self.hidden, 1), self.hidden_activation, Activation.LINEAR, self.learning_rate)

    def to_json(self) -> dict:
        return {
            "hidden": list(self.hidden),
            "hidden_activation": Activation(self.hidden_activation).value,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "seed": self.seed,
            "warm_start": self.warm_start,
            "feature_names": None if self.feature_names is None else list(self.feature_names),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PredictorConfig":
        names = doc.get("feature_names")
        return cls(tuple(doc.get("hidden", (32, 16, 16, 8))),
                   doc.get("hidden_activation", "tanh"),
                   doc.get("learning_rate", 1.2e-3), doc.get("epochs", 200),
                   doc.get("seed", 0), doc.get("warm_start", True),
                   None if names is None else tuple(names))


@dataclass(frozen=True)
class TrainingRecord:
    group: tuple
    features: GroupFeatures
    observed_gain: float

    def __post_init__(self):
        if len(self.group) < 3:
            raise ValueError("training records describe groups of at least 3 tasks")


@dataclass(frozen=True, eq=False)
class PredictorModel:
    feature_names: tuple
    input_norm: NormalizationStats
    spec: NetSpec
    params: Params
    trained_on: int
    target_mean: float = 0.0
    target_scale: float = 1.0
    train_log: tuple = field(default=(), repr=False)

    def to_json(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "norm_stats": self.input_norm.to_json(),
            "net": {"spec": self.spec.to_json(), "params": self.params.to_json()},
            "trained_on": self.trained_on,
            "target_mean": self.target_mean,
            "target_scale": self.target_scale,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PredictorModel":
        return cls(tuple(doc["feature_names"]), NormalizationStats.from_json(doc["norm_stats"]),
                   NetSpec.from_json(doc["net"]["spec"]), Params.from_json(doc["net"]["params"]),
                   doc["trained_on"], doc.get("target_mean", 0.0), doc.get("target_scale", 1.0))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PredictorModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def dedup_records(records: Sequence[TrainingRecord]) -> list:
    """One record per group; a later observation replaces an earlier one."""
    latest = {}
    for r in records:
        latest[tuple(sorted(r.group))] = r
    return [latest[k] for k in sorted(latest)]


def _design(records, names) -> tuple:
    X = np.array([r.features.vector(names) for r in records], dtype=float)
    y = np.array([r.observed_gain for r in records], dtype=float)
    return X, y


def _fit(records, config: PredictorConfig, names, norm, t_mean, t_scale, init) -> PredictorModel:
    X, y = _design(records, names)
    Xn = norm.apply(X)
    yn = (y - t_mean) / t_scale if t_scale > 0 else np.zeros_like(y)
    spec = config.spec(len(names))
    tc = TrainConfig(epochs=config.epochs, seed=config.seed)
    params, curve, _ = train(spec, tc, (Xn, yn), (Xn, yn), init=init)
    return PredictorModel(tuple(names), norm, spec, params, len(records), t_mean, t_scale,
                          tuple(curve.points))


def train_predictor(records: Sequence[TrainingRecord], config: PredictorConfig = PredictorConfig()) -> PredictorModel:
    """Fit a fresh predictor (fixed epoch count, deterministic in ``config.seed``)."""
    records = dedup_records(records)
    if len(records) < MIN_RECORDS:
        raise TooFewRecords(f"need at least {MIN_RECORDS} distinct groups, got {len(records)}")
    names = tuple(config.feature_names or GroupFeatures.names())
    X, y = _design(records, names)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12 * (1.0 + np.abs(mean))] = 0.0
    norm = NormalizationStats(mean, std)
    t_mean = float(y.mean())
    t_scale = float(y.std())
    if t_scale < 1e-12 * (1.0 + abs(t_mean)):
        t_scale = 0.0  # constant targets: predict the mean everywhere
    init = init_params(config.spec(len(names)), config.seed)
    return _fit(records, config, names, norm, t_mean, t_scale, init)


def update_predictor(model: PredictorModel, all_records: Sequence[TrainingRecord],
                     config: PredictorConfig = PredictorConfig()) -> PredictorModel:
    """Retrain on every record so far.

    With ``config.warm_start`` training continues from the current weights
    and keeps the input/target scaling of ``model``; otherwise a fresh model
    is fitted.
    """
    records = dedup_records(all_records)
    if not config.warm_start or model.target_scale == 0.0:
        return train_predictor(records, config)
    if not records:
        raise TooFewRecords("no records")
    return _fit(records, config, model.feature_names, model.input_norm,
                model.target_mean, model.target_scale, model.params)


def predict_gains(model: PredictorModel, rows) -> np.ndarray:
    """Batched prediction.  ``rows`` is a matrix in ``feature_names`` order
    or a sequence of :class:`GroupFeatures`."""
    if len(rows) and isinstance(rows[0], GroupFeatures):
        X = np.array([gf.vector(model.feature_names) for gf in rows], dtype=float)
    else:
        X = np.atleast_2d(np.asarray(rows, dtype=float))
    if X.shape[1] != len(model.feature_names):
        raise MissingFeature(f"expected {len(model.feature_names)} features, got {X.shape[1]}")
    out = forward(model.spec, model.params, model.input_norm.apply(X))[:, 0]
    return out * model.target_scale + model.target_mean


def predict_gain(model: PredictorModel, gf) -> float:
    """Predicted relative MTL gain for one group (unclamped)."""
    if isinstance(gf, GroupFeatures):
        row = [gf.vector(model.feature_names)]
    elif isinstance(gf, Mapping):
        missing = [n for n in model.feature_names if n not in gf]
        if missing:
            raise MissingFeature(f"missing features: {missing}")
        row = [[gf[n] for n in model.feature_names]]
    else:
        raise MissingFeature("expected GroupFeatures or a name->value mapping")
    return float(predict_gains(model, row)[0])


def r_squared(pred, actual) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if pred.shape != actual.shape or pred.size < 2:
        raise ValueError("r_squared needs two equal-length vectors of length >= 2")
    sst = float(np.sum((actual - actual.mean()) ** 2))
    if sst == 0.0:
        raise ZeroVariance("actual values are constant")
    return 1.0 - float(np.sum((actual - pred) ** 2)) / sst


def gain_to_loss(gain: float, stl_sum: float) -> float:
    return (1.0 - gain) * stl_sum


def loss_to_gain(loss_value: float, stl_sum: float) -> float:
    return 1.0 - loss_value / stl_sum


def write_train_log(model: PredictorModel, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "train_loss"])
        for f, v in model.train_log:
            w.writerow([f, repr(float(v))])


# ---------------------------------------------------------------------------
# partition-level estimates
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AffinityContext:
    """Everything needed to describe an arbitrary group of tasks.

    ``pair_gains`` and ``wdots`` are square matrices in ``summary.ids`` order;
    missing pair gains are NaN.
    """

    stl_losses: dict
    pair_gains: np.ndarray
    wdots: np.ndarray
    summary: TaskSummary

    def stl_sum(self, group) -> float:
        try:
            return float(sum(self.stl_losses[t] for t in group))
        except KeyError as exc:
            raise MissingPrerequisite(f"no STL loss for task {exc.args[0]}") from None

    def pair_gain(self, a: str, b: str) -> float:
        i, j = self.summary.index((a, b))
        g = self.pair_gains[i, j]
        if not np.isfinite(g):
            raise MissingPrerequisite(f"no pairwise gain for ({a}, {b})")
        return float(g)

    def group_features(self, group) -> GroupFeatures:
        try:
            return group_features(group, self.pair_gains, self.wdots, self.summary)
        except MissingPairGain as exc:
            raise MissingPrerequisite(str(exc)) from None

    def record(self, group, total_loss: float) -> TrainingRecord:
        group = tuple(sorted(group))
        return TrainingRecord(group, self.group_features(group),
                              loss_to_gain(total_loss, self.stl_sum(group)))


def predict_partition_loss(model: PredictorModel | None, partition: Partition,
                           context: AffinityContext, cache=None) -> float:
    """Estimated total loss of ``partition``.

    Singletons contribute their STL loss, pairs ``(1 - pair gain) * STL sum``,
    larger groups ``(1 - predicted gain) * STL sum``.  Groups present in
    ``cache`` contribute their trained loss.
    """
    total = 0.0
    pending, sums = [], []
    for g in partition.groups:
        if cache is not None and g in cache:
            total += cache.loss(g)
        elif len(g) == 1:
            total += context.stl_sum(g)
        elif len(g) == 2:
            total += gain_to_loss(context.pair_gain(*g), context.stl_sum(g))
        else:
            pending.append(context.group_features(g))
            sums.append(context.stl_sum(g))
    if pending:
        if model is None:
            raise MissingPrerequisite("a trained predictor is needed for groups of 3 or more")
        gains = predict_gains(model, pending)
        total += float(np.sum((1.0 - gains) * np.asarray(sums)))
    return total
