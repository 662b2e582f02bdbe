import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fundus_forge.gradcheck import grad_check
from fundus_forge.tensor import (
    ShapeError, Tensor, add, concat_channels, default_dtype, log, mul, neg, no_grad, precision, reduce_sum,
    sigmoid, slice_channels, square,
)


def test_additive_inverse_is_zero(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    assert np.array_equal(add(x, neg(x)).data, np.zeros((2, 3, 4, 4), np.float32))


def test_sigmoid_of_zero():
    assert np.all(sigmoid(Tensor(np.zeros((3, 3)))).data == 0.5)


def test_sigmoid_is_stable_for_large_inputs():
    y = sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert np.all(np.isfinite(y)) and y[0] == 0 and y[1] == 1


def test_square_gradient_at_three():
    x = Tensor(np.array([3.0]), requires_grad=True)
    reduce_sum(mul(x, x)).backward()
    assert x.grad[0] == pytest.approx(6.0)
    assert grad_check(lambda t: reduce_sum(mul(t, t)), x, eps=1e-3) < 1e-3


def test_reduce_sum_counts():
    assert reduce_sum(Tensor(np.ones((1, 1, 4, 4)))).item() == 16
    m = np.zeros((1, 1, 4, 4), bool)
    m.flat[[0, 3, 5, 9, 15]] = True
    assert reduce_sum(Tensor(np.ones((1, 1, 4, 4))), m).item() == 5


def test_masked_sum_gradient_is_mask(rng):
    m = rng.random((2, 1, 5, 5)) < 0.4
    x = Tensor(rng.standard_normal((2, 3, 5, 5)), requires_grad=True)
    reduce_sum(x, m).backward()
    assert np.array_equal(x.grad, np.broadcast_to(m, x.shape).astype(np.float32))


def test_reduce_sum_rejects_mask_of_wrong_size():
    with pytest.raises(ShapeError):
        reduce_sum(Tensor(np.ones((1, 1, 4, 4))), np.ones((1, 1, 3, 4), bool))


def test_concat_then_slice(rng):
    a = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 5, 8, 8)), requires_grad=True)
    c = concat_channels(a, b)
    assert c.shape == (1, 8, 8, 8)
    assert np.array_equal(slice_channels(c, 0, 3).data, a.data)
    g = rng.standard_normal(c.shape).astype(np.float32)
    reduce_sum(mul(c, Tensor(g))).backward()
    assert np.array_equal(a.grad, g[:, :3])
    assert np.array_equal(b.grad, g[:, 3:])


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError, match="8"):
        concat_channels(Tensor(np.ones((1, 1, 8, 8))), Tensor(np.ones((1, 1, 8, 7))))


def test_linear_gradient_equals_input(rng):
    x = Tensor(rng.standard_normal((4, 4)))
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    reduce_sum(mul(w, x)).backward()
    assert np.array_equal(w.grad, x.data)


def test_backward_twice_accumulates(rng):
    w = Tensor(rng.standard_normal(5), requires_grad=True)
    loss = reduce_sum(square(w))
    loss.backward(retain_graph=True)
    first = w.grad.copy()
    loss.backward()
    assert np.array_equal(w.grad, 2 * first)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        mul(x, x).backward()


def test_graph_is_freed_after_backward(rng):
    w = Tensor(rng.standard_normal(3), requires_grad=True)
    loss = reduce_sum(square(w))
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert not y.requires_grad


def test_log_is_floored():
    assert np.isfinite(log(Tensor(np.zeros(2))).data).all()


def test_precision_context():
    assert default_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_grad_check_constant_function_is_exact(rng):
    x = Tensor(rng.standard_normal(4))
    assert grad_check(lambda t: reduce_sum(Tensor(np.ones(4))), x) == 0.0


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-10, 10)))
def test_sum_of_squares_grad_check(values):
    with precision(np.float64):
        x = Tensor(values.copy())
        assert grad_check(lambda t: reduce_sum(square(t)), x, eps=1e-3) < 1e-4
