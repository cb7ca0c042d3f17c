import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import check_gradients
from op_cases import OPS, make_case
from timekit import numgrad as ng


def test_matmul_shape():
    out = ng.matmul(ng.Tensor(np.ones((2, 3))), ng.Tensor(np.ones((3, 2))))
    assert out.shape == (2, 2)


def test_mse_of_identical_is_zero():
    x = ng.Tensor(np.arange(6.0).reshape(2, 3))
    assert ng.mean_squared_error(x, x).item() == 0.0


def test_sigmoid_zero():
    assert ng.sigmoid(ng.Tensor(np.zeros(1))).value[0] == 0.5


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ng.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ng.matmul(ng.Tensor(np.ones((2, 3))), ng.Tensor(np.ones((2, 3))))
    with pytest.raises(ng.ShapeError, match="add"):
        ng.add(ng.Tensor(np.ones(2)), ng.Tensor(np.ones(3)))


def test_sum_of_squares_gradient():
    w = ng.parameter([1.0, 2.0])
    with ng.fresh_tape():
        ng.backward(ng.sum_(ng.hadamard(w, w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_mse_linear_matches_finite_differences():
    rng = np.random.default_rng(3)
    w = ng.parameter(rng.normal(size=(3, 3)))
    x = rng.normal(size=(3, 1))
    y = rng.normal(size=(3, 1))
    err = check_gradients(lambda ps: ng.mean_squared_error(ng.matmul(ps[0], ng.Tensor(x)), y), [w])
    assert err < 1e-5


def test_unreachable_parameter_gets_zero_grad():
    a = ng.parameter([1.0, 2.0])
    b = ng.parameter([3.0, 4.0])
    with ng.fresh_tape():
        _ = ng.tanh(b)  # recorded, but not part of the loss
        loss = ng.sum_(ng.hadamard(a, a))
        ng.backward(loss)
    np.testing.assert_array_equal(b.grad, [0.0, 0.0])

    c = ng.parameter([5.0])
    with ng.fresh_tape():
        ng.backward(ng.sum_(ng.hadamard(a, a)), params=[a, c])
    np.testing.assert_array_equal(c.grad, [0.0])


def test_backward_errors():
    a = ng.parameter(np.ones((2, 2)))
    with ng.fresh_tape():
        with pytest.raises(ng.ShapeError, match="scalar"):
            ng.backward(ng.tanh(a))
    with ng.fresh_tape():
        loss = ng.sum_(a)
        ng.backward(loss)
        with pytest.raises(ng.TapeError):
            ng.backward(loss)


def test_tape_cleared_after_backward():
    a = ng.parameter(np.ones(3))
    with ng.fresh_tape() as tape:
        ng.backward(ng.sum_(ng.tanh(a)))
        assert tape.nodes == []


def test_non_finite_forward_is_an_error():
    with np.errstate(over="ignore"), pytest.raises(ng.NonFiniteError):
        ng.scale(ng.Tensor([1e308]), 10.0)


@pytest.mark.parametrize("op", OPS)
def test_op_gradients(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    for _ in range(20):
        params, build = make_case(op, rng)
        assert check_gradients(build, params) < 1e-4


@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)), arrays(np.float64, (3, 2), elements=st.floats(-3, 3)))
def test_backward_is_linear_in_the_loss(x, y):
    w = ng.parameter(np.linspace(-1, 1, 6).reshape(2, 3))

    def loss_a():
        return ng.mean_squared_error(ng.matmul(ng.Tensor(x), w), np.zeros((3, 3)))

    def loss_b():
        return ng.sum_(ng.tanh(ng.matmul(ng.Tensor(y), w)))

    grads = []
    for build in (loss_a, loss_b, lambda: ng.add(loss_a(), loss_b())):
        with ng.fresh_tape():
            ng.backward(build(), [w])
        grads.append(w.grad.copy())
    np.testing.assert_allclose(grads[0] + grads[1], grads[2], atol=1e-12)


def test_adam_zero_grad_is_fixed_point():
    p = ng.parameter([1.0, -2.0])
    p.grad = np.zeros(2)
    state = ng.AdamState.for_params([p])
    ng.adam_step([p], state, lr=0.1)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_first_step():
    # at t=1 the bias-corrected step is lr * g / (|g| + eps)
    p = ng.parameter([1.0])
    p.grad = np.array([1.0])
    ng.adam_step([p], ng.AdamState.for_params([p]), lr=0.1)
    assert p.value[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert p.value[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_decoupled_weight_decay():
    p = ng.parameter([2.0])
    p.grad = np.zeros(1)
    ng.adam_step([p], ng.AdamState.for_params([p]), lr=1e-3, weight_decay=0.5)
    assert p.value[0] == pytest.approx(2.0 - 1e-3 * 0.5 * 2.0)


def test_adam_rejects_nan_gradient():
    p = ng.parameter([1.0])
    p.grad = np.array([np.nan])
    with pytest.raises(ng.NonFiniteError):
        ng.adam_step([p], ng.AdamState.for_params([p]), lr=1e-3)


def test_seeded_training_is_bit_identical():
    def run():
        rng = ng.make_rng(5)
        w = ng.parameter(rng.normal(size=(4, 2)))
        state = ng.AdamState.for_params([w])
        x, y = rng.normal(size=(8, 4)), rng.normal(size=(8, 2))
        for _ in range(20):
            with ng.fresh_tape():
                ng.backward(ng.mean_squared_error(ng.matmul(ng.Tensor(x), w), y))
            ng.adam_step([w], state, lr=1e-2)
        return w.value.tobytes()

    assert run() == run()
