"""Random local search over network hyper-parameters and input features.

A candidate is a hidden-layer stack, learning rate, two activations and a
selected subset of input features.  Each neighbour step changes exactly one
of these.  Candidates are scored by validation R^2 minus a complexity
penalty proportional to the trainable parameter count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidSpec
from .nn import Activation, NetSpec, TrainConfig, forward, train
from .predictor import r_squared

TUNABLES = ("layers", "neurons", "learning_rate", "hidden_activation", "output_activation", "input_features")
DEFAULT_PICK = {
    "layers": 0.1,
    "neurons": 0.3,
    "learning_rate": 0.25,
    "hidden_activation": 0.1,
    "output_activation": 0.05,
    "input_features": 0.2,
}


@dataclass(frozen=True)
class SearchSpace:
    pick: dict = field(default_factory=lambda: dict(DEFAULT_PICK))
    beta_alpha: float = 0.1
    beta_neurons: float = 0.1
    features: tuple = ()
    min_width: int = 4
    max_width: int = 128
    hidden_choices: tuple = (Activation.RELU, Activation.TANH, Activation.SIGMOID)
    output_choices: tuple = (Activation.LINEAR, Activation.TANH)

    def __post_init__(self):
        p = dict(self.pick)
        if set(p) - set(TUNABLES):
            raise InvalidSpec(f"unknown tunables: {sorted(set(p) - set(TUNABLES))}")
        if any(v < 0 for v in p.values()) or abs(sum(p.values()) - 1) > 1e-9:
            raise InvalidSpec("pick probabilities must be non-negative and sum to 1")
        for b in (self.beta_alpha, self.beta_neurons):
            if not 0 < b <= 1:
                raise InvalidSpec("change fractions must lie in (0, 1]")
        object.__setattr__(self, "pick", p)
        object.__setattr__(self, "features", tuple(self.features))

    def probabilities(self) -> tuple:
        """Tunables and their pick probabilities (feature moves dropped and
        the rest renormalized when the space has no feature list)."""
        names = [t for t in TUNABLES if t in self.pick and (t != "input_features" or self.features)]
        w = np.array([self.pick[t] for t in names], dtype=float)
        return names, w / w.sum()


@dataclass(frozen=True)
class ArchCandidate:
    hidden: tuple
    learning_rate: float
    hidden_activation: Activation = Activation.TANH
    output_activation: Activation = Activation.LINEAR
    features: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "features", tuple(self.features))
        object.__setattr__(self, "hidden_activation", Activation(self.hidden_activation))
        object.__setattr__(self, "output_activation", Activation(self.output_activation))
        if not self.hidden or min(self.hidden) < 1:
            raise InvalidSpec("need at least one hidden layer of positive width")

    def spec(self, n_in: int | None = None) -> NetSpec:
        n_in = len(self.features) if n_in is None else n_in
        return NetSpec((n_in, *self.hidden, 1), self.hidden_activation, self.output_activation,
                       self.learning_rate)

    def to_json(self) -> dict:
        return {
            "hidden": list(self.hidden),
            "learning_rate": self.learning_rate,
            "hidden_activation": self.hidden_activation.value,
            "output_activation": self.output_activation.value,
            "features": list(self.features),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ArchCandidate":
        return cls(tuple(doc["hidden"]), doc["learning_rate"], doc["hidden_activation"],
                   doc["output_activation"], tuple(doc.get("features", ())))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:12]


def _try_move(a: ArchCandidate, move: str, space: SearchSpace, rng) -> ArchCandidate | None:
    """One attempted change; ``None`` when the move is not allowed here."""
    if move == "layers":
        hidden = list(a.hidden)
        if rng.random() < 0.5:
            if len(hidden) == 1:
                return None
            del hidden[int(rng.integers(len(hidden)))]
        else:
            width = int(rng.integers(space.min_width, space.max_width + 1))
            hidden.insert(int(rng.integers(len(hidden) + 1)), width)
        return replace(a, hidden=tuple(hidden))
    if move == "neurons":
        hidden = list(a.hidden)
        i = int(rng.integers(len(hidden)))
        step = math.ceil(hidden[i] * space.beta_neurons)
        sign = 1 if rng.random() < 0.5 else -1
        if hidden[i] - step < 1:
            sign = 1
        hidden[i] += sign * step
        return replace(a, hidden=tuple(hidden))
    if move == "learning_rate":
        f = 1 + space.beta_alpha if rng.random() < 0.5 else 1 - space.beta_alpha
        if f == 0:
            f = 1 + space.beta_alpha
        return replace(a, learning_rate=a.learning_rate * f)
    if move in ("hidden_activation", "output_activation"):
        choices = space.hidden_choices if move == "hidden_activation" else space.output_choices
        current = getattr(a, move)
        others = [c for c in choices if Activation(c) is not current]
        if not others:
            return None
        return replace(a, **{move: others[int(rng.integers(len(others)))]})
    # input features
    chosen = list(a.features)
    unused = [f for f in space.features if f not in chosen]
    remove = rng.random() < 0.5
    if remove and len(chosen) <= 1:
        remove = False
    if not remove and not unused:
        if len(chosen) <= 1:
            return None
        remove = True
    if remove:
        del chosen[int(rng.integers(len(chosen)))]
    else:
        chosen.append(unused[int(rng.integers(len(unused)))])
    order = {f: k for k, f in enumerate(space.features)}
    return replace(a, features=tuple(sorted(chosen, key=order.get)))


def random_neighbour(a: ArchCandidate, space: SearchSpace, rng: np.random.Generator) -> ArchCandidate:
    """Change exactly one tunable, drawn with the space's pick probabilities.

    Disallowed moves (removing the last hidden layer, emptying the feature
    set) are rejected and a new move is drawn, except that removing the only
    feature turns into adding one.
    """
    names, p = space.probabilities()
    for _ in range(1000):
        move = names[int(rng.choice(len(names), p=p))]
        out = _try_move(a, move, space, rng)
        if out is not None and out != a:
            return out
    raise InvalidSpec("no admissible neighbour in this search space")


def changed_tunables(a: ArchCandidate, b: ArchCandidate) -> list:
    out = []
    if len(a.hidden) != len(b.hidden):
        out.append("layers")
    elif a.hidden != b.hidden:
        out.append("neurons")
    if a.learning_rate != b.learning_rate:
        out.append("learning_rate")
    if a.hidden_activation != b.hidden_activation:
        out.append("hidden_activation")
    if a.output_activation != b.output_activation:
        out.append("output_activation")
    if a.features != b.features:
        out.append("input_features")
    return out


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RecordSet:
    """Regression data with named columns."""

    X: np.ndarray
    y: np.ndarray
    names: tuple

    def columns(self, features: Sequence[str]) -> np.ndarray:
        if not features:
            return self.X
        pos = {n: k for k, n in enumerate(self.names)}
        return self.X[:, [pos[f] for f in features]]

    @classmethod
    def from_records(cls, records, names: Sequence[str] | None = None) -> "RecordSet":
        names = tuple(names or records[0].features.names())
        X = np.array([r.features.vector(names) for r in records], dtype=float)
        y = np.array([r.observed_gain for r in records], dtype=float)
        return cls(X, y, names)


def arch_score(a: ArchCandidate, train_set: RecordSet, val_set: RecordSet, omega: float,
               epochs: int = 200, seed: int = 0) -> float:
    """Validation R^2 minus ``omega`` times the trainable parameter count.

    Inputs are z-scored with training statistics.  A diverged fit scores
    ``-inf``.
    """
    Xtr = train_set.columns(a.features)
    Xva = val_set.columns(a.features)
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    spec = a.spec(Xtr.shape[1])
    try:
        params, _, _ = train(spec, TrainConfig(epochs=epochs, seed=seed),
                             ((Xtr - mu) / sd, train_set.y), ((Xva - mu) / sd, val_set.y))
    except Exception:  # noqa: BLE001 - any numerical failure just ranks last
        return -math.inf
    pred = forward(spec, params, (Xva - mu) / sd)[:, 0]
    return r_squared(pred, val_set.y) - omega * spec.n_params()


@dataclass
class NasResult:
    best: ArchCandidate
    best_score: float
    log: list  # (iteration, score, accepted, digest)

    def write_log(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "score", "accepted", "candidate"])
            for row in self.log:
                w.writerow(row)


def nas_accept_probability(score: float, new_score: float, P: float) -> float:
    """``min(1, exp((new - old) * P))``: better scores are always taken."""
    if new_score >= score:
        return 1.0
    if not math.isfinite(new_score):
        return 0.0
    return math.exp((new_score - score) * P)


def nas_search(start: ArchCandidate, space: SearchSpace, iters: int, P: float, omega: float,
               rng: np.random.Generator, train_set: RecordSet, val_set: RecordSet,
               epochs: int = 200, seed: int = 0, scorer=None) -> NasResult:
    """Random local search; returns the best-scoring candidate seen."""
    score_of = scorer or (lambda c: arch_score(c, train_set, val_set, omega, epochs, seed))
    current, s = start, score_of(start)
    best, best_s = current, s
    log = [(0, s, True, current.digest())]
    for it in range(1, iters + 1):
        cand = random_neighbour(current, space, rng)
        s_new = score_of(cand)
        ok = rng.random() < nas_accept_probability(s, s_new, P)
        if ok:
            current, s = cand, s_new
            if s > best_s:
                best, best_s = cand, s
        log.append((it, s_new, ok, cand.digest()))
    return NasResult(best, best_s, log)
