"""
Tests for the tensor ops, the recording graph and the finite-difference checker.
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from grfu.errors import ContractError, DimensionError, EvaluationError
from grfu.tensorgrad import (
    BACKWARD_RULES, GradGraph, Tensor, activation, backward, clamp, concat, divide, elementwise,
    grad_check, log_softmax, matmul, mean_all, no_grad, repeat_rows, scale, select, slice_cols,
    sum_all, transpose,
)


# ====== FORWARD OPS ======

def test_matmul_examples():
    m = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), m).values, m.values)
    assert np.array_equal(matmul(Tensor(np.zeros((2, 2))), m).values, np.zeros((2, 2)))
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), m)
    assert np.array_equal(out.values, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3) vs (2, 3)" in str(exc.value)
    assert isinstance(exc.value, ContractError)


def test_matmul_is_associative_on_random_chains():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b, c = (Tensor(rng.standard_normal((4, 4))) for _ in range(3))
        left = matmul(matmul(a, b), c).values
        right = matmul(a, matmul(b, c)).values
        assert np.max(np.abs(left - right)) <= 1e-10 * np.max(np.abs(left))


def test_elementwise_examples():
    assert np.array_equal(elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).values, [4.0, 6.0])
    x = Tensor([0.3, -1.2, 7.0])
    assert np.array_equal(elementwise("hadamard", x, Tensor(np.ones(3))).values, x.values)
    assert np.array_equal(elementwise("hadamard", Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).values, [8.0, 15.0])
    with pytest.raises(DimensionError):
        elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_no_broadcasting():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    tiled = repeat_rows(Tensor([1.0, 2.0, 3.0]), 2)
    assert tiled.shape == (2, 3)


def test_division_and_products_go_through_named_ops():
    a, b = Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[2.0, 2.0], [2.0, 2.0]])
    with pytest.raises(TypeError):
        a / b
    with pytest.raises(TypeError):
        a @ b
    assert np.array_equal(divide(a, b).values, [[0.5, 1.0], [1.5, 2.0]])
    assert np.array_equal(matmul(a, b).values, [[6.0, 6.0], [14.0, 14.0]])


def test_activation_examples():
    assert activation("sigmoid", Tensor([0.0])).item() == 0.5
    assert activation("tanh", Tensor([0.0])).item() == 0.0
    assert activation("relu", Tensor([-3.0])).item() == 0.0
    assert abs(activation("sigmoid", Tensor([1.0])).item() - 0.7310585786) < 1e-10


def test_sigmoid_symmetry():
    x = Tensor(np.linspace(-30, 30, 121))
    neg = Tensor(-x.values)
    total = activation("sigmoid", x).values + activation("sigmoid", neg).values
    np.testing.assert_allclose(total, 1.0, atol=1e-12, rtol=0)


def test_values_are_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.values[0] = 5.0


# ====== RECORDING ======

def test_ops_outside_a_graph_record_nothing():
    with GradGraph() as graph:
        matmul(Tensor(np.eye(2)), Tensor(np.ones((2, 2))))
        x = graph.parameter(Tensor([1.0, 2.0]), "x")
        with no_grad():
            activation("tanh", x)
        assert len(graph) == 0
        activation("tanh", x)
        assert len(graph) == 1


def test_duplicate_parameter_name_is_rejected():
    with GradGraph() as graph:
        graph.parameter(Tensor([1.0]), "x")
        with pytest.raises(ContractError):
            graph.parameter(Tensor([2.0]), "x")


def test_every_recorded_kind_has_a_backward_rule():
    for kind in ("matmul", "transpose", "add", "sub", "hadamard", "divide", "sigmoid", "tanh",
                 "relu", "exp", "log", "clamp", "scale", "concat", "slice_cols", "repeat_rows",
                 "sum_all", "mean_all", "log_softmax", "select"):
        assert kind in BACKWARD_RULES


# ====== BACKWARD ======

def test_backward_of_sum_is_ones():
    with GradGraph() as graph:
        x = graph.parameter(Tensor(np.arange(6.0).reshape(2, 3)), "x")
        loss = sum_all(x)
    grads = backward(graph, loss)
    assert np.array_equal(grads["x"].values, np.ones((2, 3)))


def test_unused_parameter_gets_zero_gradient():
    with GradGraph() as graph:
        graph.parameter(Tensor(np.ones((3, 2))), "x")
        loss = sum_all(Tensor([0.0]))
    grads = backward(graph, loss)
    assert np.array_equal(grads["x"].values, np.zeros((3, 2)))


def test_backward_of_sum_of_squares():
    with GradGraph() as graph:
        x = graph.parameter(Tensor([1.0, 2.0, 3.0]), "x")
        loss = sum_all(x * x)
    assert np.array_equal(backward(graph, loss)["x"].values, [2.0, 4.0, 6.0])


def test_backward_rejects_non_scalar_loss():
    with GradGraph() as graph:
        x = graph.parameter(Tensor([1.0, 2.0]), "x")
        y = x * x
    with pytest.raises(ContractError):
        backward(graph, y)


def test_backward_twice_gives_identical_gradients():
    rng = np.random.default_rng(3)
    with GradGraph() as graph:
        W = graph.parameter(Tensor(rng.standard_normal((3, 4))), "W")
        x = Tensor(rng.standard_normal(4))
        loss = sum_all(activation("tanh", matmul(W, x)))
    first = backward(graph, loss)["W"].values
    second = backward(graph, loss)["W"].values
    assert np.array_equal(first, second)


# ====== GRADIENT CHECK ======

def test_grad_check_square():
    report = grad_check(lambda p: sum_all(p["x"] * p["x"]), {"x": Tensor([3.0])}, step=1e-5)
    assert report.per_parameter["x"] < 1e-6
    assert report.step == 1e-5


def test_grad_check_constant_function():
    report = grad_check(lambda p: sum_all(Tensor([4.0])), {"x": Tensor([1.0, -2.0])})
    assert report.max_error == 0.0


def test_grad_check_non_finite_value():
    with np.errstate(invalid="ignore"):
        with pytest.raises(EvaluationError):
            grad_check(lambda p: sum_all(activation("log", p["x"])), {"x": Tensor([-1.0])})


def test_grad_check_rejects_bad_step():
    with pytest.raises(ContractError):
        grad_check(lambda p: sum_all(p["x"]), {"x": Tensor([1.0])}, step=0.0)


def test_grad_check_composite_of_every_op():
    rng = np.random.default_rng(0)
    params = {
        "W": Tensor(rng.uniform(-0.1, 0.1, (4, 3))),
        "b": Tensor(rng.uniform(-0.1, 0.1, 4)),
    }
    x = Tensor(rng.standard_normal((5, 3)))
    labels = rng.integers(4, size=5)

    def composite(p):
        z = matmul(x, transpose(p["W"])) + repeat_rows(p["b"], 5)
        gated = activation("sigmoid", z) * activation("tanh", z)
        positive = activation("exp", clamp(z, -0.5, 0.5))
        mixed = divide(gated, positive + Tensor(np.ones((5, 4))))
        picked = select(log_softmax(concat([mixed, slice_cols(z, 0, 2)], axis=-1)), labels)
        return scale(sum_all(picked), -1.0) + mean_all(activation("relu", z))

    report = grad_check(composite, params)
    assert report.passed(1e-4), report.per_parameter
