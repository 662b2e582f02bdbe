import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fundus_forge.gradcheck import grad_check
from fundus_forge.layers import (
    BatchNormState, ConvSpec, batch_norm, conv2d, max_unpool2d, maxpool2d, prelu, transposed_conv2d,
)
from fundus_forge.tensor import ShapeError, Tensor, mul, precision, reduce_sum, relu


def naive_conv(x, w, b, stride, padding, dilation):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    (sh, sw), (ph, pw), (dh, dw) = stride, padding, dilation
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[oc, ic, u, v] * xp[i, ic, y * sh + u * dh, xx * sw + v * dw]
                    out[i, oc, y, xx] = acc
    return out


def test_ones_kernel_sums():
    y = conv2d(Tensor(np.ones((1, 1, 3, 3))), ConvSpec(1, 1, 3, bias=False), Tensor(np.ones((1, 1, 3, 3))))
    assert y.shape == (1, 1, 1, 1) and y.item() == 9


def test_identity_kernel(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    w = np.zeros((3, 3, 1, 1), np.float32)
    w[range(3), range(3)] = 1
    assert np.array_equal(conv2d(x, ConvSpec(3, 3, 1, bias=False), Tensor(w)).data, x.data)


def test_dilated_conv_matches_naive_loops(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    spec = ConvSpec(2, 3, 3, padding=2, dilation=2)
    y = conv2d(Tensor(x), spec, Tensor(w), Tensor(b)).data
    assert np.allclose(y, naive_conv(x, w, b, (1, 1), (2, 2), (2, 2)), atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 2), st.integers(1, 2), st.integers(4, 8), st.integers(0, 10**6))
def test_conv_matches_naive_loops(k, s, p, d, size, seed):
    rng = np.random.default_rng(seed)
    spec = ConvSpec(2, 2, (k, k + 1), stride=s, padding=p, dilation=d)
    if min(spec.output_size((size, size))) < 1:
        return
    x, w, b = rng.standard_normal((1, 2, size, size)), rng.standard_normal(spec.weight_shape), rng.standard_normal(2)
    with precision(np.float64):
        y = conv2d(Tensor(x), spec, Tensor(w), Tensor(b)).data
    assert np.allclose(y, naive_conv(x, w, b, spec.stride, spec.padding, spec.dilation), atol=1e-10)


def test_output_size_law_over_many_geometries(rng):
    for _ in range(200):
        k, s, p, d = rng.integers(1, 5), rng.integers(1, 4), rng.integers(0, 3), rng.integers(1, 3)
        n = int(rng.integers(1, 12))
        spec = ConvSpec(1, 1, int(k), stride=int(s), padding=int(p), dilation=int(d), bias=False)
        expect = (n + 2 * p - d * (k - 1) - 1) // s + 1
        if expect < 1:
            with pytest.raises(ShapeError):
                conv2d(Tensor(np.ones((1, 1, n, n))), spec, Tensor(np.ones(spec.weight_shape)))
        else:
            y = conv2d(Tensor(np.ones((1, 1, n, n))), spec, Tensor(np.ones(spec.weight_shape)))
            assert y.shape == (1, 1, expect, expect)


def test_conv_rejects_wrong_weight_shape():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), ConvSpec(2, 1, 3), Tensor(np.ones((1, 3, 3, 3))))


def test_transposed_identity():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    y = transposed_conv2d(x, ConvSpec(1, 1, 1, bias=False), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(y.data, x.data)


def test_transposed_stride_two_places_scaled_kernel_copies(rng):
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    k = rng.standard_normal((1, 1, 2, 2))
    y = transposed_conv2d(Tensor(x), ConvSpec(1, 1, 2, stride=2, bias=False), Tensor(k)).data
    expect = np.kron(x[0, 0], np.ones((2, 2))) * np.tile(k[0, 0], (2, 2))
    assert y.shape == (1, 1, 4, 4)
    assert np.allclose(y[0, 0], expect, atol=1e-6)


@pytest.mark.parametrize("spec,hw", [
    (ConvSpec(2, 3, 3, stride=2, padding=1, output_padding=1, bias=False), (4, 4)),
    (ConvSpec(3, 2, 2, stride=2, bias=False), (3, 5)),
    (ConvSpec(2, 2, 3, padding=2, dilation=2, bias=False), (5, 5)),
])
def test_transposed_conv_is_adjoint_of_conv(rng, spec, hw):
    """transposed_conv(x) equals the input gradient of the matching convolution."""
    w = rng.standard_normal(spec.transposed_weight_shape)
    x = rng.standard_normal((2, spec.in_channels, *hw))
    y = transposed_conv2d(Tensor(x), spec, Tensor(w)).data
    fwd = ConvSpec(spec.out_channels, spec.in_channels, spec.kernel, spec.stride, spec.padding, spec.dilation, bias=False)
    z = Tensor(np.zeros((2, spec.out_channels, *y.shape[2:])), requires_grad=True)
    out = conv2d(z, fwd, Tensor(w))
    assert out.shape[2:] == hw
    reduce_sum(mul(out, Tensor(x))).backward()
    assert np.allclose(y, z.grad, atol=1e-5)


def test_transposed_rejects_large_output_padding():
    with pytest.raises(ValueError):
        transposed_conv2d(Tensor(np.ones((1, 1, 2, 2))), ConvSpec(1, 1, 3, stride=2, output_padding=2),
                          Tensor(np.ones((1, 1, 3, 3))))


def test_maxpool_small():
    y, idx = maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert y.item() == 4 and idx.item() == 3


def test_maxpool_ties_pick_first_position():
    _, idx = maxpool2d(Tensor(np.ones((1, 1, 4, 4))))
    assert idx[0, 0].tolist() == [[0, 2], [8, 10]]


def test_maxpool_matches_naive_scan(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    y, idx = maxpool2d(Tensor(x))
    for n in range(2):
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    win = x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                    u, v = divmod(int(np.argmax(win)), 2)
                    assert y.data[n, c, i, j] == win.max()
                    assert idx[n, c, i, j] == (2 * i + u) * 8 + 2 * j + v


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.ones((1, 1, 1, 4))))


def test_unpool_round_trip(rng):
    x = rng.standard_normal((2, 2, 6, 6)).astype(np.float32)
    y, idx = maxpool2d(Tensor(x))
    u = max_unpool2d(y, idx, (6, 6)).data
    hit = np.zeros_like(x, bool)
    for n in range(2):
        for c in range(2):
            hit[n, c].flat[idx[n, c].ravel()] = True
    assert np.array_equal(u[hit], x[hit]) and np.all(u[~hit] == 0)
    assert np.isclose(u.sum(), y.data.sum())
    assert not max_unpool2d(Tensor(np.zeros_like(y.data)), idx, (6, 6)).data.any()


def test_unpool_rejects_bad_indices():
    with pytest.raises(ShapeError):
        max_unpool2d(Tensor(np.ones((1, 1, 1, 1))), np.array([[[[16]]]]), (4, 4))


def test_batch_norm_standardizes(rng):
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    state = BatchNormState.fresh(3)
    y = batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, train=True).data.astype(np.float64)
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    assert state.tracked


def test_batch_norm_on_standardized_batch_is_identity(rng):
    with precision(np.float64):
        x = rng.standard_normal((4, 2, 6, 6))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        y = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), BatchNormState.fresh(2, np.float64), True)
    assert np.allclose(y.data, x, atol=1e-4)


def test_batch_norm_running_statistics(rng):
    x = rng.standard_normal((8, 1, 4, 4)) + 5
    state = BatchNormState.fresh(1, np.float64)
    with precision(np.float64):
        batch_norm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, True)
    assert state.running_mean[0] == pytest.approx(0.1 * x.mean())
    assert state.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_batch_norm_eval_before_training_is_rejected():
    with pytest.raises(RuntimeError):
        batch_norm(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState.fresh(1), False)


def test_batch_norm_gradient_32bit(rng):
    x = Tensor(rng.standard_normal((2, 4, 3, 3)))
    w = Tensor(rng.standard_normal((2, 4, 3, 3)))
    gamma, beta = Tensor(rng.uniform(0.5, 1.5, 4)), Tensor(rng.standard_normal(4))
    f = lambda t: reduce_sum(mul(batch_norm(t, gamma, beta, BatchNormState.fresh(4), True), w))  # noqa: E731
    assert grad_check(f, x, eps=1e-2) < 1e-2


def test_relu_values():
    assert relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [0.0, 2.0]


def test_prelu_unit_slope_is_identity(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)))
    assert np.array_equal(prelu(x, Tensor(np.ones(2))).data, x.data)


def test_prelu_slope_gradient(rng):
    with precision(np.float64):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)))
        a = Tensor(rng.uniform(0.1, 0.3, 3))
        assert grad_check(lambda t: reduce_sum(mul(prelu(x, t), x)), a, eps=1e-6) < 1e-3
