"""Hard-parameter-sharing multi-task networks.

A group of ``k`` tasks is trained as one network: optional task-specific
input layers, a shared trunk, optional task-specific layers after the
trunk, and one single-output head per task.  Task-specific layers are held
as stacked ``(k, fan_in, fan_out)`` tensors so a whole group is processed
with batched matmuls.  Inputs flow as ``(k, batch, width)`` arrays.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import TaskKind, TaskSet, TaskSplit, augment_to_max
from .errors import GroupTooSmall, InvalidSpec, NumericalDivergence, ZeroStlSum
from .nn import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    Activation,
    LearningCurve,
    LossKind,
    Metric,
    TrainConfig,
    activate,
    activation_grad,
    checkpoint_steps,
    default_batch_size,
    loss,
    loss_metric,
    metric,
    output_delta,
    NetSpec,
)


def group_key(ids) -> tuple:
    key = tuple(sorted(set(ids)))
    if not key:
        raise InvalidSpec("a group needs at least one task")
    return key


def group_seed(key: Sequence[str], seed: int) -> int:
    h = hashlib.sha256(("\x1f".join(key) + f"\x1e{int(seed)}").encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass(frozen=True)
class MtlArch:
    pre_widths: tuple = ()
    shared_widths: tuple = (16,)
    post_widths: tuple = ()
    hidden_activation: Activation = Activation.TANH
    output_activation: Activation = Activation.LINEAR
    learning_rate: float = 1e-2

    def __post_init__(self):
        for name in ("pre_widths", "shared_widths", "post_widths"):
            widths = tuple(int(w) for w in getattr(self, name))
            if any(w < 1 for w in widths):
                raise InvalidSpec(f"{name} must be positive")
            object.__setattr__(self, name, widths)
        if not self.shared_widths:
            raise InvalidSpec("at least one shared layer is required")
        if not self.learning_rate > 0:
            raise InvalidSpec("learning rate must be positive")
        object.__setattr__(self, "hidden_activation", Activation(self.hidden_activation))
        object.__setattr__(self, "output_activation", Activation(self.output_activation))

    def layout(self, d: int) -> list:
        """``[(shared?, fan_in, fan_out), ...]`` including the heads."""
        widths = [d, *self.pre_widths, *self.shared_widths, *self.post_widths, 1]
        n_pre, n_sh = len(self.pre_widths), len(self.shared_widths)
        out = []
        for k in range(len(widths) - 1):
            out.append((n_pre <= k < n_pre + n_sh, widths[k], widths[k + 1]))
        return out

    def to_json(self) -> dict:
        return {
            "pre_widths": list(self.pre_widths),
            "shared_widths": list(self.shared_widths),
            "post_widths": list(self.post_widths),
            "hidden_activation": self.hidden_activation.value,
            "output_activation": self.output_activation.value,
            "learning_rate": self.learning_rate,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MtlArch":
        return cls(tuple(doc.get("pre_widths", ())), tuple(doc["shared_widths"]),
                   tuple(doc.get("post_widths", ())), doc["hidden_activation"],
                   doc["output_activation"], doc["learning_rate"])

    def stl_spec(self, d: int) -> NetSpec:
        """The single-task network with the same layer stack."""
        widths = (d, *self.pre_widths, *self.shared_widths, *self.post_widths, 1)
        return NetSpec(widths, self.hidden_activation, self.output_activation, self.learning_rate)


@dataclass(frozen=True, eq=False)
class MtlResult:
    group: tuple
    per_task_loss: dict
    total_loss: float
    task_vectors: dict
    curve: LearningCurve
    z_matrix: np.ndarray | None = None
    per_task_metrics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "group": list(self.group),
            "per_task_loss": self.per_task_loss,
            "total_loss": self.total_loss,
            "task_vectors": {k: v.tolist() for k, v in self.task_vectors.items()},
            "curve": self.curve.to_json(),
            "z_matrix": None if self.z_matrix is None else self.z_matrix.tolist(),
            "per_task_metrics": self.per_task_metrics,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MtlResult":
        z = doc.get("z_matrix")
        return cls(
            tuple(doc["group"]), dict(doc["per_task_loss"]), doc["total_loss"],
            {k: np.asarray(v, dtype=float) for k, v in doc["task_vectors"].items()},
            LearningCurve.from_json(doc["curve"]),
            None if z is None else np.asarray(z, dtype=float),
            dict(doc.get("per_task_metrics", {})),
        )


class _GroupNet:
    """Parameters and forward/backward passes for one group of ``k`` tasks."""

    def __init__(self, arch: MtlArch, d: int, k: int, rng: np.random.Generator):
        self.arch = arch
        self.k = k
        self.layout = arch.layout(d)
        self.arrays = []
        for shared, fi, fo in self.layout:
            bound = math.sqrt(6.0 / (fi + fo))
            w = rng.uniform(-bound, bound, size=(fi, fo))
            # task-specific layers start identical so no slot is favoured
            self.arrays.append(w if shared else np.repeat(w[None], k, axis=0))
            self.arrays.append(np.zeros(fo if shared else (k, fo)))
        self.n_layers = len(self.layout)
        self.shared_idx = [i for L, (sh, _, _) in enumerate(self.layout) if sh for i in (2 * L, 2 * L + 1)]

    def act(self, layer):
        a = self.arch
        return a.output_activation if layer == self.n_layers - 1 else a.hidden_activation

    def forward(self, X, arrays=None):
        arrays = self.arrays if arrays is None else arrays
        zs, acts = [], [X]
        a = X
        for L, (shared, _, _) in enumerate(self.layout):
            W, b = arrays[2 * L], arrays[2 * L + 1]
            z = a @ W + (b if shared else b[:, None, :])
            a = activate(self.act(L), z)
            zs.append(z)
            acts.append(a)
        return zs, acts

    def backward(self, zs, acts, delta, per_task_shared=False):
        """Gradients of the summed per-task losses.

        With ``per_task_shared`` the shared-layer gradients keep a leading
        task axis (each task's own contribution) instead of being summed.
        """
        grads = [None] * (2 * self.n_layers)
        for L in range(self.n_layers - 1, -1, -1):
            shared, fi, fo = self.layout[L]
            a_prev = acts[L]
            gW = np.matmul(a_prev.transpose(0, 2, 1), delta)
            gb = delta.sum(axis=1)
            if shared and not per_task_shared:
                gW = gW.sum(axis=0)
                gb = gb.sum(axis=0)
            grads[2 * L], grads[2 * L + 1] = gW, gb
            if L:
                W = self.arrays[2 * L]
                back = delta @ (W.T if shared else W.transpose(0, 2, 1))
                delta = back * activation_grad(self.act(L - 1), zs[L - 1], acts[L])
        return grads

    def head_vectors(self) -> np.ndarray:
        W, b = self.arrays[-2], self.arrays[-1]
        return np.concatenate([W[:, :, 0], b], axis=1)


def _task_losses(kind: LossKind, pred, Y) -> np.ndarray:
    if kind is LossKind.MSE:
        return np.mean((pred - Y) ** 2, axis=(1, 2))
    return -np.mean(Y * np.log(pred) + (1 - Y) * np.log1p(-pred), axis=(1, 2))


def _single_forward(net: _GroupNet, t: int, X: np.ndarray) -> np.ndarray:
    a = X
    for L, (shared, _, _) in enumerate(net.layout):
        W, b = net.arrays[2 * L], net.arrays[2 * L + 1]
        a = activate(net.act(L), a @ W + b if shared else a @ W[t] + b[t])
    return a[:, 0]


def train_mtl(
    splits: Sequence[TaskSplit],
    arch: MtlArch,
    config: TrainConfig,
    *,
    augment_size: int | None = None,
    compute_affinity: bool = False,
    affinity_every: int = 10,
) -> MtlResult:
    """Train one hard-sharing model on a group of tasks.

    Tasks are put in canonical (sorted id) order and the batch schedule is
    seeded from ``(group, config.seed)``, so the result depends only on the
    group membership.  Training rows are cyclically repeated to
    ``augment_size`` (default: largest train split in the group); each step
    draws the same row positions from every task and all heads start
    from the same initial weights, so cloned tasks train identically.  Reported losses are
    per-task test losses in the training objective's metric.
    """
    if len(splits) < 2:
        raise GroupTooSmall(f"MTL needs at least 2 tasks, got {len(splits)}")
    splits = sorted(splits, key=lambda s: s.id)
    key = tuple(s.id for s in splits)
    if len(set(key)) != len(key):
        raise InvalidSpec("duplicate task in group")
    k = len(splits)
    kind = config.loss_kind
    size = augment_size or max(s.train.n_samples for s in splits)
    train_ts = augment_to_max(TaskSet(tuple(s.train for s in splits)), size)
    X = np.stack([t.features for t in train_ts])
    Y = np.stack([t.targets for t in train_ts])[:, :, None]
    d = X.shape[2]

    rng = np.random.default_rng(group_seed(key, config.seed))
    net = _GroupNet(arch, d, k, rng)
    bs = min(size, config.batch_size or default_batch_size(size))
    per_epoch = math.ceil(size / bs)
    total_steps = per_epoch * config.epochs
    marks = checkpoint_steps(total_steps, config.curve_checkpoints)
    lr = arch.learning_rate
    m = [np.zeros_like(a) for a in net.arrays]
    v = [np.zeros_like(a) for a in net.arrays]
    z_sum = np.zeros((k, k))
    z_count = 0

    def val_total():
        tot = 0.0
        for t, s in enumerate(splits):
            tot += loss(kind, _single_forward(net, t, s.val.features), s.val.targets)
        if not math.isfinite(tot):
            raise NumericalDivergence(f"validation loss became {tot}")
        return tot

    points, step, mi = [], 0, 0
    rows = np.arange(k)[:, None]
    for _ in range(config.epochs):
        perm = np.tile(rng.permutation(size), (k, 1))
        for s in range(per_epoch):
            idx = perm[:, s * bs:(s + 1) * bs]
            Xb, Yb = X[rows, idx], Y[rows, idx]
            zs, acts = net.forward(Xb)
            delta = output_delta(_HeadSpec(arch.output_activation), kind, zs[-1], acts[-1], Yb) * k
            record = compute_affinity and step % affinity_every == 0
            grads = net.backward(zs, acts, delta, per_task_shared=record)
            if record:
                base = _task_losses(kind, acts[-1], Yb)
                z_sum += _lookahead(net, Xb, Yb, kind, grads, base, lr)
                z_count += 1
                for i in net.shared_idx:
                    grads[i] = grads[i].sum(axis=0)
            step += 1
            c1 = 1.0 - ADAM_BETA1 ** step
            c2 = 1.0 - ADAM_BETA2 ** step
            for p, g, mm, vv in zip(net.arrays, grads, m, v):
                mm *= ADAM_BETA1
                mm += (1 - ADAM_BETA1) * g
                vv *= ADAM_BETA2
                vv += (1 - ADAM_BETA2) * g * g
                p -= lr * (mm / c1) / (np.sqrt(vv / c2) + ADAM_EPS)
            while mi < len(marks) and marks[mi] == step:
                points.append((config.curve_checkpoints[mi], val_total()))
                mi += 1

    per_task, extra = {}, {}
    score = loss_metric(kind)
    for t, s in enumerate(splits):
        pred = _single_forward(net, t, s.test.features)
        per_task[s.id] = metric(score, pred, s.test.targets)
        if kind is LossKind.BCE:
            extra[s.id] = _classification_metrics(pred, s.test.targets)
    total = float(sum(per_task[i] for i in key))
    vecs = net.head_vectors()
    return MtlResult(
        group=key,
        per_task_loss=per_task,
        total_loss=total,
        task_vectors={key[t]: vecs[t].copy() for t in range(k)},
        curve=LearningCurve(tuple(points)),
        z_matrix=(z_sum / max(z_count, 1)) if compute_affinity else None,
        per_task_metrics=extra,
    )


@dataclass(frozen=True)
class _HeadSpec:
    output_activation: Activation


def _classification_metrics(pred, y) -> dict:
    out = {"error_rate": metric(Metric.ERROR_RATE, pred, y)}
    try:
        out["auc"] = metric(Metric.AUC, pred, y)
    except ValueError:
        out["auc"] = None
    return out


def _lookahead(net: _GroupNet, Xb, Yb, kind, grads, base, lr) -> np.ndarray:
    """``Z[i, j] = 1 - L_j(shared - lr * grad_i) / L_j(shared)`` on one batch."""
    k = net.k
    z = np.zeros((k, k))
    safe = np.maximum(base, 1e-12)
    for i in range(k):
        arrays = list(net.arrays)
        for idx in net.shared_idx:
            arrays[idx] = net.arrays[idx] - lr * grads[idx][i]
        _, acts = net.forward(Xb, arrays)
        z[i] = 1.0 - _task_losses(kind, acts[-1], Yb) / safe
    return z


def extract_task_vectors(result: MtlResult) -> dict:
    """Output-head weights followed by bias, one vector per task."""
    return {t: np.asarray(v, dtype=float).copy() for t, v in result.task_vectors.items()}


def inter_task_affinity(
    splits: Sequence[TaskSplit],
    arch: MtlArch,
    config: TrainConfig,
    every: int = 10,
    augment_size: int | None = None,
) -> np.ndarray:
    """Lookahead affinity matrix recorded while training all tasks jointly.

    Rows and columns follow sorted task id order.
    """
    res = train_mtl(splits, arch, config, augment_size=augment_size,
                    compute_affinity=True, affinity_every=every)
    return res.z_matrix


def relative_mtl_gain(stl_losses, mtl_total: float) -> float:
    """``(sum(STL) - MTL) / sum(STL)``; negative values mean negative transfer."""
    vals = stl_losses.values() if isinstance(stl_losses, dict) else stl_losses
    s = float(sum(vals))
    if s <= 0:
        raise ZeroStlSum("sum of STL losses must be positive")
    return (s - mtl_total) / s


def loss_kind_for(kind: TaskKind) -> LossKind:
    return LossKind.BCE if TaskKind(kind) is TaskKind.CLASSIFICATION else LossKind.MSE
