"""Small dense feed-forward networks trained with Adam, in plain numpy.

Everything runs in float64 on the CPU.  A network is described by a
:class:`NetSpec`; its weights live in an immutable :class:`Params` value.
Training is single-threaded and fully determined by the seed.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (
    DegenerateLabels,
    DomainError,
    InvalidSpec,
    NumericalDivergence,
    ShapeMismatch,
)

SIGMOID_EPS = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_CHECKPOINTS = (0.1, 0.2, 0.3, 0.5, 0.7, 1.0)


class Activation(str, enum.Enum):
    LINEAR = "linear"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"


class LossKind(str, enum.Enum):
    MSE = "mse"
    BCE = "bce"


class Metric(str, enum.Enum):
    MSE = "mse"
    LOGLOSS = "logloss"
    ERROR_RATE = "error_rate"
    AUC = "auc"


def activate(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.LINEAR:
        return z
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    # sigmoid, clamped away from {0, 1} so log-loss stays finite
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return np.clip(p, SIGMOID_EPS, 1.0 - SIGMOID_EPS)


def activation_grad(kind: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Derivative of the activation wrt its pre-activation."""
    if kind is Activation.LINEAR:
        return np.ones_like(z)
    if kind is Activation.RELU:
        return (z > 0).astype(z.dtype)
    if kind is Activation.TANH:
        return 1.0 - a * a
    inside = (a > SIGMOID_EPS) & (a < 1.0 - SIGMOID_EPS)
    return np.where(inside, a * (1.0 - a), 0.0)


@dataclass(frozen=True)
class NetSpec:
    layer_widths: tuple
    hidden_activation: Activation = Activation.TANH
    output_activation: Activation = Activation.LINEAR
    learning_rate: float = 1e-3

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise InvalidSpec("need at least an input and an output width")
        if min(widths) < 1:
            raise InvalidSpec(f"layer widths must be >= 1: {widths}")
        if not self.learning_rate > 0:
            raise InvalidSpec("learning rate must be positive")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "hidden_activation", Activation(self.hidden_activation))
        object.__setattr__(self, "output_activation", Activation(self.output_activation))

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def activation(self, layer: int) -> Activation:
        return self.output_activation if layer == self.n_layers - 1 else self.hidden_activation

    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[k] * w[k + 1] + w[k + 1] for k in range(len(w) - 1))

    def to_json(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "hidden_activation": self.hidden_activation.value,
            "output_activation": self.output_activation.value,
            "learning_rate": self.learning_rate,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NetSpec":
        return cls(tuple(doc["layer_widths"]), doc["hidden_activation"],
                   doc["output_activation"], doc["learning_rate"])


@dataclass(frozen=True, eq=False)
class Params:
    """Weights ``(fan_in, fan_out)`` and biases ``(fan_out,)`` per layer."""

    weights: tuple
    biases: tuple

    def arrays(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "Params":
        return cls(tuple(arrays[0::2]), tuple(arrays[1::2]))

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflatten(self, flat: np.ndarray) -> "Params":
        out, k = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[k:k + a.size], dtype=float).reshape(a.shape).copy())
            k += a.size
        return Params.from_arrays(out)

    @property
    def layer_widths(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def to_json(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Params":
        return cls(tuple(np.asarray(W, dtype=float).reshape(doc["layer_widths"][k], -1)
                         for k, W in enumerate(doc["weights"])),
                   tuple(np.asarray(b, dtype=float) for b in doc["biases"]))

    def dumps(self) -> str:
        return json.dumps(self.to_json())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int | None = None
    seed: int = 0
    loss_kind: LossKind = LossKind.MSE
    curve_checkpoints: tuple = DEFAULT_CHECKPOINTS

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidSpec("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidSpec("batch_size must be >= 1")
        cps = tuple(float(c) for c in self.curve_checkpoints)
        if not cps or any(not 0 < c <= 1 for c in cps) or list(cps) != sorted(set(cps)):
            raise InvalidSpec("checkpoints must be strictly increasing values in (0, 1]")
        if cps[-1] != 1.0:
            cps = cps + (1.0,)
        object.__setattr__(self, "curve_checkpoints", cps)
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))


@dataclass(frozen=True)
class LearningCurve:
    points: tuple  # ((fraction, val_loss), ...)

    @property
    def fractions(self) -> tuple:
        return tuple(f for f, _ in self.points)

    @property
    def losses(self) -> tuple:
        return tuple(v for _, v in self.points)

    def at(self, fraction: float) -> float:
        for f, v in self.points:
            if abs(f - fraction) < 1e-12:
                return v
        raise KeyError(fraction)

    def to_json(self) -> list:
        return [list(p) for p in self.points]

    @classmethod
    def from_json(cls, doc) -> "LearningCurve":
        return cls(tuple((float(f), float(v)) for f, v in doc))


def default_batch_size(n: int) -> int:
    return int(min(128, max(8, n // 16)))


# ---------------------------------------------------------------------------
# core numerics
# ---------------------------------------------------------------------------


def init_params(spec: NetSpec, seed: int) -> Params:
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    w = spec.layer_widths
    weights, biases = [], []
    for k in range(len(w) - 1):
        bound = math.sqrt(6.0 / (w[k] + w[k + 1]))
        weights.append(rng.uniform(-bound, bound, size=(w[k], w[k + 1])))
        biases.append(np.zeros(w[k + 1]))
    return Params(tuple(weights), tuple(biases))


def _check_input(spec: NetSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.layer_widths[0]:
        raise ShapeMismatch(f"input has {X.shape[1]} columns, network expects {spec.layer_widths[0]}")
    return X


def _forward_cache(spec: NetSpec, arrays: Sequence[np.ndarray], X: np.ndarray):
    zs, acts = [], [X]
    a = X
    for k in range(spec.n_layers):
        z = a @ arrays[2 * k] + arrays[2 * k + 1]
        a = activate(spec.activation(k), z)
        zs.append(z)
        acts.append(a)
    return zs, acts


def forward(spec: NetSpec, params: Params, X: np.ndarray) -> np.ndarray:
    X = _check_input(spec, X)
    _, acts = _forward_cache(spec, params.arrays(), X)
    return acts[-1]


def _as_col(y, n_out: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y.reshape(-1, n_out) if y.ndim == 1 or y.shape[-1] != n_out else y


def loss(kind: LossKind, pred, y) -> float:
    """Mean squared error or binary cross-entropy."""
    kind = LossKind(kind)
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(y, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred has {p.size} values, targets {t.size}")
    if kind is LossKind.MSE:
        return float(np.mean((p - t) ** 2))
    if np.any((t != 0) & (t != 1)):
        raise DomainError("BCE targets must be 0 or 1")
    if np.any((p <= 0) | (p >= 1)):
        raise DomainError("BCE predictions must lie strictly inside (0, 1)")
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log1p(-p)))


def output_delta(spec: NetSpec, kind: LossKind, z_out, a_out, y) -> np.ndarray:
    """d(mean loss)/d(output pre-activation)."""
    n = a_out.size
    if kind is LossKind.MSE:
        dA = 2.0 * (a_out - y) / n
        return dA * activation_grad(spec.output_activation, z_out, a_out)
    if spec.output_activation is Activation.SIGMOID:
        inside = (a_out > SIGMOID_EPS) & (a_out < 1.0 - SIGMOID_EPS)
        return np.where(inside, (a_out - y) / n, 0.0)
    if np.any((a_out <= 0) | (a_out >= 1)):
        raise DomainError("BCE requires outputs inside (0, 1); use a sigmoid output layer")
    dA = (a_out - y) / (a_out * (1.0 - a_out)) / n
    return dA * activation_grad(spec.output_activation, z_out, a_out)


def backprop(spec: NetSpec, arrays, zs, acts, delta) -> list:
    grads = [None] * (2 * spec.n_layers)
    for k in range(spec.n_layers - 1, -1, -1):
        grads[2 * k] = acts[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k:
            delta = (delta @ arrays[2 * k].T) * activation_grad(spec.activation(k - 1), zs[k - 1], acts[k])
    return grads


def _grad_arrays(spec, arrays, X, y, kind):
    zs, acts = _forward_cache(spec, arrays, X)
    delta = output_delta(spec, kind, zs[-1], acts[-1], y)
    return backprop(spec, arrays, zs, acts, delta)


def grad(spec: NetSpec, params: Params, X, y, loss_kind: LossKind = LossKind.MSE) -> Params:
    """Exact gradient of the mean batch loss wrt every weight and bias."""
    X = _check_input(spec, X)
    if X.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    y = _as_col(y, spec.layer_widths[-1])
    if y.shape[0] != X.shape[0]:
        raise ShapeMismatch(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    return Params.from_arrays(_grad_arrays(spec, params.arrays(), X, y, LossKind(loss_kind)))


@dataclass(frozen=True, eq=False)
class AdamState:
    m: tuple
    v: tuple
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> "AdamState":
        return cls(tuple(np.zeros_like(a) for a in arrays), tuple(np.zeros_like(a) for a in arrays), 0)


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` may be :class:`Params` or plain array lists; the
    return value mirrors the input type.  Inputs are not modified.
    """
    wrap = isinstance(params, Params)
    p_arr = params.arrays() if wrap else [np.asarray(p, dtype=float) for p in params]
    g_arr = grads.arrays() if isinstance(grads, Params) else [np.asarray(g, dtype=float) for g in grads]
    t = state.t + 1
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_arr, g_arr, state.m, state.v):
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS))
        new_m.append(m)
        new_v.append(v)
    out = Params.from_arrays(new_p) if wrap else new_p
    return out, AdamState(tuple(new_m), tuple(new_v), t)


class _Adam:
    """In-place Adam used inside training loops (same arithmetic as adam_step)."""

    def __init__(self, arrays, lr):
        self.lr = lr
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        for p, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def checkpoint_steps(total_steps: int, fractions: Sequence[float]) -> list:
    return [max(1, int(round(f * total_steps))) for f in fractions]


def train(
    spec: NetSpec,
    config: TrainConfig,
    train_data,
    val_data,
    init: Params | None = None,
):
    """Mini-batch Adam for ``config.epochs`` epochs.

    ``train_data`` and ``val_data`` are ``(X, y)`` pairs (or objects with
    ``features``/``targets``).  Validation loss is recorded at every curve
    checkpoint.  Returns ``(params, curve, final_val_loss)`` with the
    parameters of the final epoch.
    """
    Xtr, ytr = _xy(train_data)
    Xva, yva = _xy(val_data)
    Xtr = _check_input(spec, Xtr)
    Xva = _check_input(spec, Xva)
    n_out = spec.layer_widths[-1]
    ytr, yva = _as_col(ytr, n_out), _as_col(yva, n_out)
    kind = config.loss_kind
    n = Xtr.shape[0]
    bs = min(n, config.batch_size or default_batch_size(n))
    per_epoch = math.ceil(n / bs)
    total = per_epoch * config.epochs
    marks = checkpoint_steps(total, config.curve_checkpoints)

    rng = np.random.default_rng(config.seed)
    arrays = [a.copy() for a in (init or init_params(spec, config.seed)).arrays()]
    opt = _Adam(arrays, spec.learning_rate)

    def val_loss():
        _, acts = _forward_cache(spec, arrays, Xva)
        v = loss(kind, acts[-1], yva)
        if not math.isfinite(v):
            raise NumericalDivergence(f"validation loss became {v}")
        return v

    points, step, mi = [], 0, 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for s in range(per_epoch):
            idx = perm[s * bs:(s + 1) * bs]
            g = _grad_arrays(spec, arrays, Xtr[idx], ytr[idx], kind)
            opt.step(arrays, g)
            step += 1
            while mi < len(marks) and marks[mi] == step:
                points.append((config.curve_checkpoints[mi], val_loss()))
                mi += 1
    params = Params.from_arrays([a.copy() for a in arrays])
    curve = LearningCurve(tuple(points))
    return params, curve, points[-1][1]


def _xy(data):
    if hasattr(data, "features"):
        return data.features, data.targets
    X, y = data
    return X, y


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------


def auc(pred, y) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties get mid-ranks)."""
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(y, dtype=float).ravel()
    n_pos = int(np.sum(t == 1))
    n_neg = int(np.sum(t == 0))
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs both classes present")
    ranks = rankdata(p)
    return float((ranks[t == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def metric(kind: Metric, pred, y) -> float:
    kind = Metric(kind)
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(y, dtype=float).ravel()
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred has {p.size} values, targets {t.size}")
    if kind is Metric.MSE:
        return loss(LossKind.MSE, p, t)
    if kind is Metric.LOGLOSS:
        return loss(LossKind.BCE, np.clip(p, SIGMOID_EPS, 1 - SIGMOID_EPS), t)
    if kind is Metric.ERROR_RATE:
        return float(np.mean((p > 0.5) != (t == 1)))
    return auc(p, t)


def loss_metric(kind: LossKind) -> Metric:
    return Metric.MSE if LossKind(kind) is LossKind.MSE else Metric.LOGLOSS
