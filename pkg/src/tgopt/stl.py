"""Single-task baselines and the learning-curve features derived from them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TaskSplit
from .errors import DegenerateFit, MissingCheckpoint
from .nn import LearningCurve, NetSpec, TrainConfig, forward, loss_metric, metric, train

CURVE_EPS = 1e-12


@dataclass(frozen=True)
class StlResult:
    task_id: str
    final_loss: float
    curve: LearningCurve
    curve_grads: dict
    fit_a: float
    fit_b: float
    target_sigma: float
    target_var: float
    sample_size: int
    params: object = field(default=None, compare=False, repr=False)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "final_loss": self.final_loss,
            "curve": self.curve.to_json(),
            "curve_grads": {repr(k): v for k, v in self.curve_grads.items()},
            "fit_a": self.fit_a,
            "fit_b": self.fit_b,
            "target_sigma": self.target_sigma,
            "target_var": self.target_var,
            "sample_size": self.sample_size,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "StlResult":
        return cls(
            doc["task_id"], doc["final_loss"], LearningCurve.from_json(doc["curve"]),
            {float(k): v for k, v in doc["curve_grads"].items()},
            doc["fit_a"], doc["fit_b"], doc["target_sigma"], doc["target_var"],
            doc["sample_size"],
        )


def curve_gradient(curve: LearningCurve, x: float) -> float:
    """Relative change of the loss at fraction ``x`` versus the final loss."""
    try:
        lx = curve.at(x)
        lend = curve.at(1.0)
    except KeyError as exc:
        raise MissingCheckpoint(f"curve has no checkpoint at {exc.args[0]}") from None
    return (lx - lend) / max(lend, CURVE_EPS)


def fit_log(x, y) -> tuple[float, float]:
    """Least-squares fit of ``y = a*ln(x) + b`` via the normal equations."""
    lx = np.log(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    n = lx.size
    sxx = float(np.sum((lx - lx.mean()) ** 2))
    if n < 2 or sxx == 0.0:
        raise DegenerateFit("log fit needs at least two distinct x values")
    a = float(np.sum((lx - lx.mean()) * (y - y.mean())) / sxx)
    b = float(y.mean() - a * lx.mean())
    return a, b


def fit_log_curve(curve: LearningCurve) -> tuple[float, float]:
    """Fit ``a*ln(step) + b`` to the loss change relative to the first checkpoint.

    Steps are checkpoint indices starting at 1.
    """
    losses = np.asarray(curve.losses, dtype=float)
    if losses.size < 2:
        raise DegenerateFit("need at least two curve points")
    rel = (losses - losses[0]) / max(losses[0], CURVE_EPS)
    return fit_log(np.arange(1, losses.size + 1), rel)


def run_stl(split: TaskSplit, spec: NetSpec, config: TrainConfig) -> StlResult:
    params, curve, _ = train(spec, config, split.train, split.val)
    pred = forward(spec, params, split.test.features)
    final = metric(loss_metric(config.loss_kind), pred, split.test.targets)
    grads = {x: curve_gradient(curve, x) for x in curve.fractions if x < 1.0}
    a, b = fit_log_curve(curve)
    y = split.train.targets
    sigma = float(np.std(y))
    return StlResult(
        task_id=split.id,
        final_loss=final,
        curve=curve,
        curve_grads=grads,
        fit_a=a,
        fit_b=b,
        target_sigma=sigma,
        target_var=sigma * sigma,
        sample_size=split.train.n_samples,
        params=params,
    )
