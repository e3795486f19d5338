import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ncnn import tensor as T
from ncnn.errors import ContractError, DimensionError

from gradcheck import check, projected


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(values):
    return T.Tensor(values, requires_grad=True)


# -- conv2d -----------------------------------------------------------------


def test_conv_identity_kernel():
    out = T.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out.values, np.ones((1, 3, 3)))


def test_conv_output_shape_stride_two():
    out = T.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)), np.zeros(1), stride=2)
    assert out.shape == (1, 2, 2)


@pytest.mark.parametrize("h,k,s,p", [(7, 3, 1, 0), (7, 3, 2, 1), (8, 5, 3, 2), (5, 5, 1, 0)])
def test_conv_shape_arithmetic(h, k, s, p):
    out = T.conv2d(np.zeros((2, h, h)), np.zeros((3, 2, k, k)), np.zeros(3), stride=s, padding=p)
    expected = (h + 2 * p - k) // s + 1
    assert out.shape == (3, expected, expected)


def test_conv_matches_direct_windowed_sum(rng):
    x = rng.normal(size=(2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 2))
    b = rng.normal(size=3)
    out = T.conv2d(x, w, b, stride=2, padding=1).values
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    for f in range(3):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                window = xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 2]
                assert out[f, i, j] == pytest.approx((window * w[f]).sum() + b[f], abs=1e-12)


def test_conv_gradients_match_finite_differences(rng):
    x, w, b = param(rng.normal(size=(2, 5, 5))), param(rng.normal(size=(3, 2, 3, 3))), param(rng.normal(size=3))
    weights = rng.normal(size=(3, 3, 3))
    assert check(lambda: projected(T.conv2d(x, w, b), weights), [x, w, b]) <= 1e-4


def test_conv_gradients_strided_padded_batch(rng):
    x, w, b = param(rng.normal(size=(2, 2, 6, 6))), param(rng.normal(size=(2, 2, 3, 3))), param(rng.normal(size=2))
    weights = rng.normal(size=(2, 2, 3, 3))
    assert check(lambda: projected(T.conv2d(x, w, b, stride=2, padding=1), weights), [x, w, b]) <= 1e-4


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 2, 2)), np.zeros(1))


def test_conv_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


# -- maxpool ------------------------------------------------------------------


def test_maxpool_constant_input():
    out = T.maxpool2d(np.full((2, 4, 4), 3.5), 2)
    np.testing.assert_array_equal(out.values, np.full((2, 2, 2), 3.5))


def test_maxpool_single_window():
    out = T.maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2)
    np.testing.assert_array_equal(out.values, [[[4.0]]])


def test_maxpool_gradient(rng):
    x = param(rng.normal(size=(1, 6, 6)))
    weights = rng.normal(size=(1, 3, 3))
    assert check(lambda: projected(T.maxpool2d(x, 2), weights), [x]) <= 1e-4


def test_maxpool_overlapping_windows_gradient(rng):
    x = param(rng.normal(size=(2, 7, 7)))
    weights = rng.normal(size=(2, 3, 3))
    assert check(lambda: projected(T.maxpool2d(x, 3, 2), weights), [x]) <= 1e-4


def test_maxpool_tie_goes_to_first_element():
    x = param(np.ones((1, 2, 2)))
    with T.Tape() as tape:
        y = T.tensor_sum(T.maxpool2d(x, 2))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError):
        T.maxpool2d(np.zeros((1, 3, 3)), 4)


# -- relu, dense --------------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 0.0, 2.0])).values, [0.0, 0.0, 2.0])


def test_relu_positive_is_identity():
    x = np.array([0.5, 1.0, 7.0])
    np.testing.assert_array_equal(T.relu(x).values, x)


def test_relu_gradient_piecewise():
    x = param([3.0, -3.0])
    with T.Tape() as tape:
        y = T.tensor_sum(T.relu(x))
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, [1.0, 0.0])


def test_dense_identity():
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(T.dense(x, np.eye(3), np.zeros(3)).values, x)


def test_dense_worked_example():
    out = T.dense(np.array([3.0, 4.0]), np.array([[1.0, 2.0]]), np.array([1.0]))
    np.testing.assert_array_equal(out.values, [12.0])


def test_dense_gradients(rng):
    x, w, b = param(rng.normal(size=8)), param(rng.normal(size=(4, 8))), param(rng.normal(size=4))
    weights = rng.normal(size=4)
    assert check(lambda: projected(T.dense(x, w, b), weights), [x, w, b]) <= 1e-4


def test_dense_batched_gradients(rng):
    x, w, b = param(rng.normal(size=(5, 8))), param(rng.normal(size=(4, 8))), param(rng.normal(size=4))
    weights = rng.normal(size=(5, 4))
    assert check(lambda: projected(T.dense(x, w, b), weights), [x, w, b]) <= 1e-4


def test_dense_dimension_mismatch():
    with pytest.raises(DimensionError):
        T.dense(np.zeros(3), np.zeros((2, 4)), np.zeros(2))


# -- softmax, cross-entropy ---------------------------------------------------


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(np.zeros(2)).values, [0.5, 0.5])


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.0, 700.0])
def test_softmax_ratio_three(c):
    np.testing.assert_allclose(T.softmax(np.array([c, c + math.log(3)])).values, [0.25, 0.75], atol=1e-12)


def test_softmax_direct_formula():
    x = np.array([2.0, -1.0, 0.5])
    direct = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(T.softmax(x).values, direct, atol=1e-12, rtol=0)


def test_softmax_gradient(rng):
    z = param(rng.normal(size=(3, 4)))
    weights = rng.normal(size=(3, 4))
    assert check(lambda: projected(T.softmax(z), weights), [z]) <= 1e-4


finite_logits = arrays(np.float64, st.integers(2, 6), elements=st.floats(-30, 30))


@settings(max_examples=200, deadline=None)
@given(finite_logits, st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(z, c):
    p = T.softmax(z).values
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) <= 1e-9
    np.testing.assert_allclose(T.softmax(z + c).values, p, atol=1e-9, rtol=0)


def test_cross_entropy_perfect_one_hot():
    assert T.cross_entropy_soft(np.array([0.0, 1.0]), np.array([0.0, 1.0])).item() == pytest.approx(0.0, abs=1e-11)


def test_cross_entropy_uniform():
    assert T.cross_entropy_soft(np.array([0.5, 0.5]), np.array([0.5, 0.5])).item() == pytest.approx(math.log(2), abs=1e-9)


def test_cross_entropy_soft_target_hand_value():
    expected = -(0.15 * math.log(0.3) + 0.85 * math.log(0.7))
    got = T.cross_entropy_soft(np.array([0.3, 0.7]), np.array([0.15, 0.85])).item()
    assert got == pytest.approx(expected, abs=1e-6)
    assert got == pytest.approx(0.4838, abs=1e-4)


def test_cross_entropy_clamps_log_zero():
    value = T.cross_entropy_soft(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item()
    assert value == pytest.approx(-math.log(1e-12))


def test_cross_entropy_gradient(rng):
    p = param(rng.uniform(0.1, 0.9, size=(4, 2)))
    target = rng.dirichlet([1, 1], size=4)
    assert check(lambda: T.cross_entropy_soft(p, target), [p]) <= 1e-4


# -- tape ---------------------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = param(np.arange(6.0).reshape(2, 3))
    with T.Tape() as tape:
        y = T.tensor_sum(x)
    tape.backward(y)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_product_rule():
    x, y = param(3.0), param(-2.0)
    with T.Tape() as tape:
        z = x * y
    tape.backward(z)
    assert x.grad == -2.0 and y.grad == 3.0


def test_backward_requires_scalar():
    x = param(np.ones(3))
    with T.Tape() as tape:
        y = T.relu(x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_fan_out_accumulates():
    x = param([2.0])
    with T.Tape() as tape:
        y = T.tensor_sum(T.add(T.mul(x, x), x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [5.0])


def test_gradient_of_sum_of_losses_is_sum_of_gradients(rng):
    w = param(rng.normal(size=(3, 4)))
    b = param(np.zeros(3))
    x1, x2 = rng.normal(size=4), rng.normal(size=4)

    def loss(x):
        return T.tensor_sum(T.relu(T.dense(x, w, b)))

    grads = []
    for x in (x1, x2):
        w.zero_grad()
        with T.Tape() as tape:
            value = loss(x)
        tape.backward(value)
        grads.append(w.grad)
    w.zero_grad()
    with T.Tape() as tape:
        value = T.add(loss(x1), loss(x2))
    tape.backward(value)
    np.testing.assert_allclose(w.grad, grads[0] + grads[1], atol=1e-9)


def test_tape_visits_each_op_once_in_order():
    x = param(np.ones(3))
    with T.Tape() as tape:
        y = T.relu(x)
        z = T.tensor_sum(y)
    assert [n.op for n in tape.nodes] == ["relu", "sum"]
    assert tape.nodes[1].inputs[0] is tape.nodes[0].output
    tape.backward(z)


def test_no_recording_outside_tape():
    x = param(np.ones(3))
    y = T.relu(x)
    assert not y.requires_grad


def test_forward_is_deterministic(rng):
    x, w, b = rng.normal(size=(2, 8, 8)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    a = T.maxpool2d(T.relu(T.conv2d(x, w, b, padding=1)), 2).values
    c = T.maxpool2d(T.relu(T.conv2d(x, w, b, padding=1)), 2).values
    assert a.tobytes() == c.tobytes()


def test_dropout_identity_at_rate_zero(rng):
    x = T.Tensor(rng.normal(size=5))
    assert T.dropout(x, 0.0, rng) is x


def test_dropout_preserves_expectation(rng):
    x = T.Tensor(np.ones(200000))
    out = T.dropout(x, 0.5, rng).values
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert out.mean() == pytest.approx(1.0, abs=0.01)


def test_maxpool_gradient_with_cropped_edges(rng):
    x = param(rng.normal(size=(2, 3, 7, 9)))
    weights = rng.normal(size=(2, 3, 3, 4))
    assert check(lambda: projected(T.maxpool2d(x, 2), weights), [x]) <= 1e-4
