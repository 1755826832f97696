"""Adam and cosine schedule behavior."""

import numpy as np
import pytest

from wbfusion.engine import Tensor
from wbfusion.optim import AdamState, CosineSchedule, adam_step, cosine_lr


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    before = p.data.copy()
    state = AdamState()
    for _ in range(5):
        adam_step([p], [np.zeros(3, dtype=np.float32)], state, lr=0.1)
    assert np.array_equal(p.data, before)
    assert state.step == 5


def test_first_step_moves_by_about_lr():
    p = Tensor(np.array([0.5]), requires_grad=True, dtype=np.float64)
    state = AdamState()
    adam_step([p], [np.array([1.0])], state, lr=0.01)
    # bias correction makes the first update lr * 1/(1+eps)
    assert abs((0.5 - p.data[0]) - 0.01) < 1e-6


def test_quadratic_descent():
    # 100 steps on f(x) = x^2 from x=1 with lr 0.1 ends near the minimum
    p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
    state = AdamState()
    for _ in range(100):
        adam_step([p], [2.0 * p.data], state, lr=0.1)
    assert abs(p.data[0]) < 0.1


def test_adam_shape_mismatch_raises():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError, match="shape"):
        adam_step([p], [np.zeros(4, dtype=np.float32)], AdamState(), lr=0.1)


def test_cosine_endpoints_and_midpoint():
    sched = CosineSchedule(lr_start=1e-3, lr_end=1e-5, total_steps=1000)
    assert cosine_lr(sched, 0) == pytest.approx(1e-3, rel=1e-12)
    assert cosine_lr(sched, 1000) == pytest.approx(1e-5, rel=1e-12)
    assert cosine_lr(sched, 500) == pytest.approx((1e-3 + 1e-5) / 2, rel=1e-9)
    assert cosine_lr(sched, 500) == pytest.approx(5.05e-4, rel=1e-9)


def test_cosine_monotone_non_increasing():
    sched = CosineSchedule(total_steps=321)
    values = [cosine_lr(sched, s) for s in range(322)]
    assert all(a >= b for a, b in zip(values, values[1:]))
