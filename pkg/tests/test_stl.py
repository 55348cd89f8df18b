import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgopt.data import SplitSpec, Task, split_task, synth_taskset, split_taskset
from tgopt.errors import DegenerateFit, MissingCheckpoint
from tgopt.mtl import MtlArch
from tgopt.nn import LearningCurve, LossKind, Metric, TrainConfig, forward, metric
from tgopt.stl import StlResult, curve_gradient, fit_log, fit_log_curve, run_stl


def _curve(losses, fracs=(0.1, 0.2, 0.3, 0.5, 0.7, 1.0)):
    return LearningCurve(tuple(zip(fracs, losses)))


def test_curve_gradient_examples():
    c = _curve([2.0, 1.5, 1.2, 1.1, 0.5, 1.0])
    assert curve_gradient(c, 0.1) == 1.0
    assert curve_gradient(c, 0.7) == -0.5
    assert curve_gradient(_curve([1.0] * 6), 0.3) == 0
    with pytest.raises(MissingCheckpoint):
        curve_gradient(c, 0.4)


def test_curve_gradient_zero_end_is_guarded():
    c = _curve([1.0, 0, 0, 0, 0, 0.0])
    assert math.isfinite(curve_gradient(c, 0.1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=6, max_size=6), st.floats(0.001, 1000))
def test_curve_gradient_scale_invariant(losses, c):
    a, b = _curve(losses), _curve([c * v for v in losses])
    for x in (0.1, 0.2, 0.3, 0.5, 0.7):
        assert math.isclose(curve_gradient(a, x), curve_gradient(b, x), rel_tol=1e-9, abs_tol=1e-12)


def test_fit_log_exact_recovery():
    x = np.arange(1, 6)
    a, b = fit_log(x, 2 * np.log(x) + 1)
    assert abs(a - 2) <= 1e-9 and abs(b - 1) <= 1e-9
    x = np.arange(1, 11)
    a, b = fit_log(x, -0.5 * np.log(x))
    assert abs(a + 0.5) <= 1e-9 and abs(b) <= 1e-9
    with pytest.raises(DegenerateFit):
        fit_log([2, 2, 2], [1, 2, 3])


def test_fit_log_curve_uses_relative_change_from_first_point():
    assert fit_log_curve(_curve([3.0] * 6)) == (0.0, 0.0)
    steps = np.arange(1, 7)
    rel = -0.3 * np.log(steps)
    a, b = fit_log_curve(_curve(list(2.0 * (1 + rel))))
    assert abs(a + 0.3) <= 1e-9 and abs(b) <= 1e-9


def _split(seed=0):
    ts, _ = synth_taskset(2, 1, 3, 40, 0.1, 5)
    return split_taskset(ts, SplitSpec(seed=seed))[ts.ids[0]]


def test_run_stl_populates_and_is_deterministic():
    sp = _split()
    spec = MtlArch(shared_widths=(4,)).stl_spec(3)
    cfg = TrainConfig(epochs=10, seed=1)
    a, b = run_stl(sp, spec, cfg), run_stl(sp, spec, cfg)
    assert a == b
    assert set(a.curve_grads) == {0.1, 0.2, 0.3, 0.5, 0.7}
    assert a.target_var == a.target_sigma ** 2 and a.final_loss >= 0
    assert a.sample_size == sp.train.n_samples
    again = forward(spec, a.params, sp.test.features)
    assert metric(Metric.MSE, again, sp.test.targets) == a.final_loss


def test_run_stl_constant_target_sigma_zero():
    rng = np.random.default_rng(0)
    t = Task("c", rng.normal(size=(20, 2)), np.zeros(20))
    sp = split_task(t, SplitSpec())
    r = run_stl(sp, MtlArch(shared_widths=(3,)).stl_spec(2), TrainConfig(epochs=20, seed=0))
    assert r.target_sigma == 0 and r.target_var == 0
    assert r.curve.losses[-1] <= r.curve.losses[0]


def test_stl_json_round_trip():
    r = run_stl(_split(), MtlArch(shared_widths=(3,)).stl_spec(3), TrainConfig(epochs=3, seed=0))
    assert StlResult.from_json(r.to_json()) == r
