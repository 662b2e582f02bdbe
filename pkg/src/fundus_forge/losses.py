"""Training objectives: masked negative SSIM and binary cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .tensor import LOG_FLOOR, ShapeError, Tensor, add, clamp, div, log, mul, neg, reduce_sum, sub


@dataclass(frozen=True)
class SSIMParams:
    gaussian_sigma: float = 1.5
    window_radius: int = 5
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.gaussian_sigma <= 0 or self.window_radius < 0 or self.dynamic_range <= 0:
            raise ValueError(f"invalid SSIM parameters {self}")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("SSIM stability constants must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    def window(self) -> np.ndarray:
        """1-D Gaussian weights; the 2-D window is their outer product and sums to 1."""
        r = self.window_radius
        t = np.arange(-r, r + 1, dtype=np.float64)
        w = np.exp(-(t**2) / (2 * self.gaussian_sigma**2))
        return w / w.sum()


def _reflect_pad(x: np.ndarray, r: int, axis: int) -> np.ndarray:
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    return np.pad(x, pad, mode="reflect")


def _reflect_fold(g: np.ndarray, r: int, axis: int) -> np.ndarray:
    """Adjoint of a ``numpy.pad(..., mode='reflect')`` of width ``r`` along ``axis``."""
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0] - 2 * r
    out = g[r : r + n].copy()
    for k in range(1, r + 1):
        out[k] += g[r - k]
        out[n - 1 - k] += g[r + n - 1 + k]
    return np.moveaxis(out, 0, axis)


def gaussian_filter(x: Tensor, params: SSIMParams) -> Tensor:
    """Separable Gaussian smoothing of the two spatial axes with reflective borders."""
    r = params.window_radius
    h, w = x.shape[-2:]
    if h <= r or w <= r:
        raise ShapeError(f"gaussian_filter: image {h}x{w} too small for window radius {r}")
    k = params.window().astype(x.dtype)

    rows, cols = x.data.ndim - 2, x.data.ndim - 1
    a = sliding_window_view(_reflect_pad(x.data, r, cols), k.size, axis=cols) @ k
    out = np.ascontiguousarray(sliding_window_view(_reflect_pad(a, r, rows), k.size, axis=rows) @ k)

    def backward(g):
        # the kernel is symmetric, so the adjoint correlation reuses it unflipped
        zero_rows = [(0, 0)] * g.ndim
        zero_rows[rows] = (2 * r, 2 * r)
        ga = sliding_window_view(np.pad(g, zero_rows), k.size, axis=rows) @ k
        ga = _reflect_fold(ga, r, rows)
        zero_cols = [(0, 0)] * g.ndim
        zero_cols[cols] = (2 * r, 2 * r)
        ga = sliding_window_view(np.pad(ga, zero_cols), k.size, axis=cols) @ k
        return (_reflect_fold(ga, r, cols),)

    return Tensor._result(out, (x,), backward)


def ssim_map(x: Tensor, y: Tensor, params: SSIMParams = SSIMParams()) -> Tensor:
    """Per-pixel structural similarity of two single-channel image batches."""
    if x.data.ndim != 4 or x.shape != y.shape or x.shape[1] != 1:
        raise ShapeError(f"ssim_map: need equal single-channel shapes, got {x.shape} and {y.shape}")
    c1, c2 = params.c1, params.c2
    mu_x = gaussian_filter(x, params)
    mu_y = gaussian_filter(y, params)
    mu_xx = mul(mu_x, mu_x)
    mu_yy = mul(mu_y, mu_y)
    mu_xy = mul(mu_x, mu_y)
    var_x = sub(gaussian_filter(mul(x, x), params), mu_xx)
    var_y = sub(gaussian_filter(mul(y, y), params), mu_yy)
    cov = sub(gaussian_filter(mul(x, y), params), mu_xy)
    num = mul(add(mul(mu_xy, 2.0), c1), add(mul(cov, 2.0), c2))
    den = mul(add(add(mu_xx, mu_yy), c1), add(add(var_x, var_y), c2))
    return div(num, den)


def ssim_loss(pred: Tensor, target: Tensor, roi, params: SSIMParams = SSIMParams()) -> Tensor:
    """Negative sum of the SSIM map over the pixels where ``roi`` is 1."""
    m = roi.data if isinstance(roi, Tensor) else np.asarray(roi)
    if not np.any(m):
        raise ValueError("ssim_loss: empty region of interest")
    return neg(reduce_sum(ssim_map(pred, target, params), m))


def bce_loss(pred: Tensor, target) -> Tensor:
    """Summed binary cross-entropy; predictions are clamped away from 0 and 1."""
    s = target.data if isinstance(target, Tensor) else np.asarray(target)
    if s.shape != pred.shape:
        raise ShapeError(f"bce_loss: prediction {pred.shape} vs target {s.shape}")
    if not np.all((s == 0) | (s == 1)):
        raise ValueError("bce_loss: target must be binary")
    s = s.astype(pred.dtype)
    p = clamp(pred, LOG_FLOOR, 1 - LOG_FLOOR)
    one_minus = sub(Tensor(np.ones((), dtype=pred.dtype), dtype=pred.dtype), p)
    ll = add(mul(log(p), s), mul(log(one_minus), 1 - s))
    return neg(reduce_sum(ll))


def roi_intersection(roi_retinography: np.ndarray, roi_angiography: np.ndarray) -> np.ndarray:
    """Pixelwise AND of the two modalities' regions of interest."""
    a, b = np.asarray(roi_retinography), np.asarray(roi_angiography)
    if a.shape != b.shape:
        raise ShapeError(f"roi_intersection: shapes {a.shape} and {b.shape} differ")
    return np.logical_and(a != 0, b != 0)


def loss_domain(roi_retinography: np.ndarray, roi_angiography: np.ndarray, radius: int) -> np.ndarray:
    """Multimodal ROI eroded so every counted SSIM window lies inside both ROIs."""
    omega = roi_intersection(roi_retinography, roi_angiography)
    if radius <= 0:
        return omega
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    lead = omega.shape[:-2]
    flat = omega.reshape(-1, *omega.shape[-2:])
    eroded = np.stack([ndimage.binary_erosion(m, structure=structure, border_value=0) for m in flat])
    return eroded.reshape(*lead, *omega.shape[-2:])
