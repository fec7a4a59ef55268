import numpy as np
import pytest

from dannseg.error import DannSegError, ErrorCode
from dannseg.optimizer import SGD, Adam, build_optimizer
from dannseg.tensor import Tensor


def _param(value=1.0, grad=2.0):
    tensor = Tensor(np.array([value]), requires_grad=True)
    tensor.grad = np.array([grad])
    return [("theta", tensor)], tensor


def test_sgd_descends():
    params, theta = _param()
    SGD().step(params, lr=0.1)
    np.testing.assert_allclose(theta.data, [0.8])


def test_sgd_ascends_when_maximising():
    params, theta = _param()
    SGD().step(params, lr=0.1, maximize=True)
    np.testing.assert_allclose(theta.data, [1.2])


def test_first_adam_step_moves_by_learning_rate():
    params, theta = _param()
    optimizer = Adam()
    optimizer.step(params, lr=0.1)
    np.testing.assert_allclose(theta.data, [0.9], atol=1e-6)
    assert optimizer.state.step == 1
    np.testing.assert_allclose(optimizer.state.m["theta"], [0.2])
    np.testing.assert_allclose(optimizer.state.v["theta"], [0.004])


def test_adam_ascent_mirrors_descent():
    params, theta = _param()
    Adam().step(params, lr=0.1, maximize=True)
    np.testing.assert_allclose(theta.data, [1.1], atol=1e-6)


def test_missing_gradient_counts_as_zero():
    tensor = Tensor(np.array([1.0]), requires_grad=True)
    SGD().step([("theta", tensor)], lr=0.5)
    np.testing.assert_array_equal(tensor.data, [1.0])


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_non_positive_learning_rate_is_rejected(kind):
    params, _ = _param()
    with pytest.raises(DannSegError) as info:
        build_optimizer(kind).step(params, lr=0.0)
    assert info.value.code == ErrorCode.INVALID_CONFIG


def test_unknown_optimizer():
    with pytest.raises(DannSegError):
        build_optimizer("rmsprop")
