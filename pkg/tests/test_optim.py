import numpy as np
import pytest

from tiny_nodule_detector.optim import SGD, sgd_step
from tiny_nodule_detector.tensor import Parameter


def test_plain_gradient_step():
    p = np.zeros(1)
    sgd_step([p], [np.ones(1)], [], lr=0.1, momentum=0.0)
    assert p[0] == pytest.approx(-0.1)


def test_momentum_recurrence_over_two_steps():
    p, state = np.zeros(1), []
    sgd_step([p], [np.ones(1)], state, lr=0.01, momentum=0.937)
    assert (state[0][0], p[0]) == (pytest.approx(1.0), pytest.approx(-0.01))
    sgd_step([p], [np.ones(1)], state, lr=0.01, momentum=0.937)
    assert (state[0][0], p[0]) == (pytest.approx(1.937), pytest.approx(-0.02937))


def test_zero_gradient_moves_parameters_only_through_velocity():
    p, state = np.ones(2), []
    sgd_step([p], [np.zeros(2)], state, lr=0.1, momentum=0.9)
    np.testing.assert_array_equal(p, np.ones(2))
    sgd_step([p], [np.ones(2)], state, lr=0.1, momentum=0.9)
    moved = p.copy()
    sgd_step([p], [None], state, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(p, moved - 0.1 * 0.9)


def test_momentum_zero_is_vanilla_descent(rng):
    p, grads = rng.standard_normal(5), rng.standard_normal((3, 5))
    expected, state = p.copy(), []
    for g in grads:
        sgd_step([p], [g], state, lr=0.05, momentum=0.0)
        expected -= 0.05 * g
    np.testing.assert_allclose(p, expected)


def test_optimizer_updates_parameters_in_place():
    w = Parameter(np.array([1.0, 2.0]))
    optimizer = SGD([w], lr=0.5, momentum=0.0)
    (w * w).sum().backward()
    optimizer.step()
    np.testing.assert_allclose(w.data, [0.0, 0.0])
    optimizer.zero_grad()
    assert w.grad is None or not w.grad.any()


def test_zero_learning_rate_is_a_no_op():
    w = Parameter(np.array([1.0, 2.0]))
    optimizer = SGD([w], lr=0.0)
    (w * 3.0).sum().backward()
    optimizer.step()
    np.testing.assert_array_equal(w.data, [1.0, 2.0])
    assert optimizer.velocity == []


@pytest.mark.parametrize("lr, momentum", [(-0.1, 0.9), (0.01, 1.0), (0.01, -0.5)])
def test_optimizer_validates_hyperparameters(lr, momentum):
    with pytest.raises(ValueError):
        SGD([], lr=lr, momentum=momentum)
