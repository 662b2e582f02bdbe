"""Differentiable layers: convolutions, pooling, normalization, activations.

Convolutions are cross-correlations computed with strided window views
(im2col) and a single tensordot; their backward passes scatter the column
gradient back with one strided add per kernel tap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, grad_enabled

Pair = Tuple[int, int]


def _pair(v) -> Pair:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a (transposed) convolution."""

    in_channels: int
    out_channels: int
    kernel: Pair = (3, 3)
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    dilation: Pair = (1, 1)
    bias: bool = True
    output_padding: Pair = (0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "dilation", "output_padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be positive: {self.in_channels}, {self.out_channels}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError(f"invalid geometry {self}")

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels, *self.kernel)

    @property
    def transposed_weight_shape(self) -> tuple:
        return (self.in_channels, self.out_channels, *self.kernel)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel[0] * self.kernel[1]

    def output_size(self, size: Pair) -> Pair:
        return tuple(
            (n + 2 * p - d * (k - 1) - 1) // s + 1
            for n, p, d, k, s in zip(size, self.padding, self.dilation, self.kernel, self.stride)
        )

    def transposed_output_size(self, size: Pair) -> Pair:
        return tuple(
            (n - 1) * s - 2 * p + d * (k - 1) + 1 + op
            for n, p, d, k, s, op in zip(
                size, self.padding, self.dilation, self.kernel, self.stride, self.output_padding
            )
        )


def _windows(xp: np.ndarray, kernel: Pair, stride: Pair, dilation: Pair, out: Pair) -> np.ndarray:
    """Strided view of shape (N, C, Ho, Wo, kh, kw) over a padded input."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, c, out[0], out[1], kernel[0], kernel[1]),
        strides=(s0, s1, s2 * stride[0], s3 * stride[1], s2 * dilation[0], s3 * dilation[1]),
        writeable=False,
    )


def _im2col(xp: np.ndarray, kernel: Pair, stride: Pair, dilation: Pair, out: Pair) -> np.ndarray:
    """Contiguous (C, kh, kw, N, Ho, Wo) copy of the windows; one matmul then does the convolution."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kernel[0], kernel[1], n, out[0], out[1]), dtype=xp.dtype)
    hs = stride[0] * (out[0] - 1) + 1
    ws = stride[1] * (out[1] - 1) + 1
    for i in range(kernel[0]):
        r = i * dilation[0]
        for j in range(kernel[1]):
            q = j * dilation[1]
            cols[:, i, j] = xt[:, :, r : r + hs : stride[0], q : q + ws : stride[1]]
    return cols


def _correlate(cols: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(N, Cout, Ho, Wo) from im2col columns and (Cout, C, kh, kw) weights."""
    n, ho, wo = cols.shape[3:]
    out = w.reshape(w.shape[0], -1) @ cols.reshape(-1, n * ho * wo)
    return out.reshape(w.shape[0], n, ho, wo).transpose(1, 0, 2, 3)


def _channel_major(g: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C, N*H*W)."""
    return g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)


def _scatter_taps(cols: np.ndarray, full: Pair, kernel: Pair, stride: Pair, dilation: Pair) -> np.ndarray:
    """Adjoint of :func:`_windows`.

    ``cols`` has shape (C, kh, kw, N, Ho, Wo); the result is (N, C, *full).
    """
    c, kh, kw, n, ho, wo = cols.shape
    acc = np.zeros((c, n, full[0], full[1]), dtype=cols.dtype)
    hs = stride[0] * (ho - 1) + 1
    ws = stride[1] * (wo - 1) + 1
    for i in range(kh):
        r = i * dilation[0]
        for j in range(kw):
            q = j * dilation[1]
            acc[:, :, r : r + hs : stride[0], q : q + ws : stride[1]] += cols[:, i, j]
    return acc.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, padding: Pair) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _check_conv(x: Tensor, spec: ConvSpec, weights: Tensor, expected_w: tuple, kind: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{kind}: expected a rank-4 input, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"{kind}: input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weights.shape != expected_w:
        raise ShapeError(f"{kind}: weights shape {weights.shape}, expected {expected_w}")


def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """2-D cross-correlation with stride, zero padding and dilation.

    ``weights`` has shape ``(out_channels, in_channels, kh, kw)``.
    """
    _check_conv(x, spec, weights, spec.weight_shape, "conv2d")
    ho, wo = spec.output_size(x.shape[2:])
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: non-positive output {ho}x{wo} for input {x.shape[2:]} with kernel {spec.kernel}, "
            f"stride {spec.stride}, padding {spec.padding}, dilation {spec.dilation}"
        )
    xp = _pad(x.data, spec.padding)
    cols = _im2col(xp, spec.kernel, spec.stride, spec.dilation, (ho, wo))
    w = weights.data
    out = _correlate(cols, w)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    parents = (x, weights) if bias is None else (x, weights, bias)
    if not (grad_enabled() and any(p.requires_grad for p in parents)):
        return Tensor._result(out, parents, None)
    in_hw = x.shape[2:]
    ph, pw = spec.padding

    def backward(g):
        gx = gw = None
        gc = _channel_major(g)
        if x.requires_grad:
            taps = (w.reshape(w.shape[0], -1).T @ gc).reshape(cols.shape)
            full = _scatter_taps(taps, xp.shape[2:], spec.kernel, spec.stride, spec.dilation)
            gx = full[:, :, ph : ph + in_hw[0], pw : pw + in_hw[1]]
        if weights.requires_grad:
            gw = (gc @ cols.reshape(-1, gc.shape[1]).T).reshape(w.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._result(out, parents, backward)


def _transposed_core(x: np.ndarray, w: np.ndarray, spec: ConvSpec, out_hw: Pair) -> np.ndarray:
    h, wd = x.shape[2:]
    full = tuple(
        (n - 1) * s + d * (k - 1) + 1 + p + op
        for n, s, d, k, p, op in zip((h, wd), spec.stride, spec.dilation, spec.kernel, spec.padding, spec.output_padding)
    )
    cols = np.tensordot(w, x, axes=([0], [1]))  # (Cout, kh, kw, N, H, W)
    acc = _scatter_taps(cols, full, spec.kernel, spec.stride, spec.dilation)
    ph, pw = spec.padding
    return acc[:, :, ph : ph + out_hw[0], pw : pw + out_hw[1]]


def transposed_conv2d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Transposed convolution; ``stride`` acts as the upsampling factor.

    ``weights`` has shape ``(in_channels, out_channels, kh, kw)``, i.e. the
    weight layout of the conv2d mapping ``out_channels -> in_channels`` whose
    input-gradient this operation computes.
    """
    _check_conv(x, spec, weights, spec.transposed_weight_shape, "transposed_conv2d")
    out_hw = spec.transposed_output_size(x.shape[2:])
    if min(out_hw) < 1:
        raise ShapeError(
            f"transposed_conv2d: non-positive output {out_hw} for input {x.shape[2:]} with kernel "
            f"{spec.kernel}, stride {spec.stride}, padding {spec.padding}"
        )
    if any(op >= max(s, d) for op, s, d in zip(spec.output_padding, spec.stride, spec.dilation)):
        raise ShapeError(f"transposed_conv2d: output_padding {spec.output_padding} must be below stride")
    w = weights.data
    out = _transposed_core(x.data, w, spec, out_hw)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    parents = (x, weights) if bias is None else (x, weights, bias)
    if not (grad_enabled() and any(p.requires_grad for p in parents)):
        return Tensor._result(out, parents, None)
    in_hw = x.shape[2:]
    xd = x.data

    def backward(g):
        # re-embed g into the uncropped scatter buffer, then correlate
        ph, pw = spec.padding
        full = tuple(
            (n - 1) * s + d * (k - 1) + 1 + p + op
            for n, s, d, k, p, op in zip(in_hw, spec.stride, spec.dilation, spec.kernel, spec.padding, spec.output_padding)
        )
        gf = np.zeros((g.shape[0], g.shape[1], *full), dtype=g.dtype)
        gf[:, :, ph : ph + out_hw[0], pw : pw + out_hw[1]] = g
        cols = _im2col(gf, spec.kernel, spec.stride, spec.dilation, in_hw)
        gx = gw = None
        if x.requires_grad:
            gx = _correlate(cols, w)
        if weights.requires_grad:
            xc = _channel_major(xd)
            gw = (xc @ cols.reshape(-1, xc.shape[1]).T).reshape(w.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._result(out, parents, backward)


def maxpool2d(x: Tensor, window: Pair = (2, 2), stride: Optional[Pair] = None) -> Tuple[Tensor, np.ndarray]:
    """Max pooling that also returns the flat spatial argmax of every window.

    Ties go to the lowest flat index. The returned indices address positions
    in the ``H * W`` plane of the input.
    """
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"maxpool2d: window {kh}x{kw} larger than input {h}x{w}")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    xd = np.ascontiguousarray(x.data)
    win = _windows(xd, (kh, kw), (sh, sw), (1, 1), (ho, wo)).reshape(n, c, ho, wo, kh * kw)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho).reshape(-1, 1) * sh + local // kw
    cols = np.arange(wo).reshape(1, -1) * sw + local % kw
    indices = (rows * w + cols).astype(np.int64)

    def backward(g):
        return (_scatter_flat(g, indices, (n, c, h, w)),)

    return Tensor._result(out, (x,), backward), indices


def _scatter_flat(values: np.ndarray, indices: np.ndarray, shape: tuple) -> np.ndarray:
    n, c, h, w = shape
    base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1, 1)
    flat = np.bincount((indices + base).ravel(), weights=values.ravel(), minlength=n * c * h * w)
    return flat.astype(values.dtype, copy=False).reshape(shape)


def max_unpool2d(x: Tensor, indices: np.ndarray, out_size: Pair) -> Tensor:
    """Scatter ``x`` to the stored argmax positions of a ``out_size`` plane."""
    if indices.shape != x.shape:
        raise ShapeError(f"max_unpool2d: indices shape {indices.shape} differs from input {x.shape}")
    h, w = _pair(out_size)
    if indices.size and (indices.min() < 0 or indices.max() >= h * w):
        raise ShapeError(f"max_unpool2d: index out of range for output {h}x{w}")
    n, c = x.shape[:2]
    out = _scatter_flat(x.data, indices, (n, c, h, w))

    def backward(g):
        return (np.take_along_axis(g.reshape(n, c, h * w), indices.reshape(n, c, -1), axis=-1).reshape(indices.shape),)

    return Tensor._result(out, (x,), backward)


@dataclass
class BatchNormState:
    """Running statistics of one batch-normalization layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    tracked: bool = False
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with batch statistics and updates the running
    statistics; eval mode uses the running statistics, which must have been
    updated at least once or loaded from a checkpoint.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} for {c} channels")
    xd = x.data
    shape = (1, c, 1, 1)
    if train:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        mom = state.momentum
        unbiased = var * (m / max(m - 1, 1))
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
        state.tracked = True
    else:
        if not state.tracked:
            raise RuntimeError("batch_norm: eval mode before any running-statistics update")
        mean, var = state.running_mean.astype(xd.dtype), state.running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + state.eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(shape)) * inv.reshape(shape)
    gd = gamma.data.reshape(shape)
    out = xhat * gd + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if train:
            m = xd.shape[0] * xd.shape[2] * xd.shape[3]
            gx = (inv.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv.reshape(shape)
        return gx, gg, gb

    return Tensor._result(out, (x, gamma, beta), backward)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one learnable slope per channel."""
    c = x.shape[1]
    if slope.shape != (c,):
        raise ShapeError(f"prelu: slope shape {slope.shape} for {c} channels")
    xd = x.data
    neg = xd <= 0
    a = slope.data.reshape(1, c, 1, 1)
    out = np.where(neg, a * xd, xd)

    def backward(g):
        return g * np.where(neg, a, 1), (g * xd * neg).sum(axis=(0, 2, 3))

    return Tensor._result(out, (x, slope), backward)


def activation(x: Tensor, kind: str, slope: Optional[Tensor] = None) -> Tensor:
    from .tensor import relu, sigmoid

    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a slope tensor")
        return prelu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")
