"""Tests for optimizers and the poly learning-rate schedule."""

from __future__ import annotations

import numpy as np
import pytest

from dcss_nas.config import LrSchedule, OptimizerConfig
from dcss_nas.errors import NumericalError, ShapeError
from dcss_nas.optim import SGD, Adam, adam_step, poly_lr, sgd_step
from dcss_nas.tensor import Tensor


def test_poly_lr_endpoints() -> None:
    schedule = LrSchedule(base_lr=0.01, max_iter=100, power=0.9)
    assert poly_lr(0, schedule) == pytest.approx(0.01)
    assert poly_lr(50, schedule) == pytest.approx(0.01 * 0.5**0.9)
    assert poly_lr(100, schedule) == 0.0
    assert poly_lr(250, schedule) == 0.0


def test_poly_lr_monotone_non_increasing() -> None:
    schedule = LrSchedule(base_lr=0.1, max_iter=37)
    rates = [poly_lr(i, schedule) for i in range(40)]
    assert all(a >= b for a, b in zip(rates, rates[1:], strict=False))


def test_sgd_step_matches_closed_form() -> None:
    p = np.array([1.0, -2.0])
    g = np.array([0.5, 0.25])
    v = np.array([0.1, 0.0])
    sgd_step(p, g, v, 0.1, momentum=0.9, weight_decay=0.01)
    expected_v = 0.9 * np.array([0.1, 0.0]) + g + 0.01 * np.array([1.0, -2.0])
    np.testing.assert_allclose(v, expected_v)
    np.testing.assert_allclose(p, np.array([1.0, -2.0]) - 0.1 * expected_v)


def test_adam_first_step_moves_by_lr() -> None:
    p = np.array([0.0, 0.0])
    g = np.array([3.0, -0.001])
    first, second = np.zeros(2), np.zeros(2)
    adam_step(p, g, first, second, 1, 0.01)
    # bias correction makes the first update lr * sign(g) (up to epsilon)
    np.testing.assert_allclose(p, [-0.01, 0.01], rtol=1e-4)


def test_step_rejects_non_finite_gradient() -> None:
    with pytest.raises(NumericalError):
        sgd_step(np.zeros(2), np.array([np.nan, 0.0]), np.zeros(2), 0.1, name="w")


def test_step_rejects_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        adam_step(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 1, 0.1)


def test_sgd_decays_only_registered_names() -> None:
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = SGD(
        [("a", a), ("b", b)],
        OptimizerConfig(kind="sgd", momentum=0.0, weight_decay=0.5),
        decay={"a"},
    )
    a.grad = np.zeros(2)
    b.grad = np.zeros(2)
    opt.step(1.0)
    np.testing.assert_allclose(a.data, 0.5)
    np.testing.assert_allclose(b.data, 1.0)


def test_parameters_without_grad_are_untouched() -> None:
    a = Tensor(np.ones(2), requires_grad=True)
    opt = SGD([("a", a)], OptimizerConfig(kind="sgd", weight_decay=1.0))
    opt.step(0.1)
    np.testing.assert_allclose(a.data, 1.0)
    assert opt.steps == 1


def test_register_adds_only_new_parameters() -> None:
    a = Tensor(np.ones(1), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([("a", a)], OptimizerConfig(kind="adam"))
    assert opt.register([("a", a), ("b", b)]) == 1
    assert set(opt.first) == {"a", "b"}
    assert opt.first["b"].shape == (3,)


def test_duplicate_names_rejected() -> None:
    a = Tensor(np.ones(1), requires_grad=True)
    with pytest.raises(ValueError, match="unique"):
        SGD([("a", a), ("a", a)], OptimizerConfig())


def test_state_dict_round_trip_resumes_identically() -> None:
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=3) for _ in range(6)]

    def run(split: int | None) -> np.ndarray:
        w = Tensor(np.zeros(3), requires_grad=True)
        opt = Adam([("w", w)], OptimizerConfig(kind="adam", base_lr=0.1))
        for i, g in enumerate(grads):
            if split is not None and i == split:
                state = opt.state_dict()
                opt = Adam([("w", w)], OptimizerConfig(kind="adam", base_lr=0.1))
                opt.load_state_dict(state)
            w.grad = g
            opt.step(0.1)
        return w.data

    np.testing.assert_array_equal(run(None), run(3))


def test_adam_on_square_matches_hand_recurrence() -> None:
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([("p", p)], OptimizerConfig(kind="adam", base_lr=0.1, beta1=0.9, beta2=0.999))
    value, m, v = 1.0, 0.0, 0.0
    for t in range(1, 6):
        p.grad = 2.0 * p.data
        opt.step(0.1)
        g = 2.0 * value
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat, v_hat = m / (1 - 0.9**t), v / (1 - 0.999**t)
        value -= 0.1 * m_hat / (v_hat**0.5 + 1e-8)
        assert p.data[0] == pytest.approx(value, abs=1e-12)


def test_weight_decay_alone_shrinks_parameters() -> None:
    p = Tensor(np.array([1.5, -0.75, 0.2]), requires_grad=True)
    opt = SGD([("p", p)], OptimizerConfig(kind="sgd", momentum=0.9, weight_decay=0.1))
    previous = np.abs(p.data)
    for _ in range(5):
        p.grad = np.zeros(3)
        opt.step(0.1)
        current = np.abs(p.data)
        assert np.all(current < previous)
        previous = current.copy()
