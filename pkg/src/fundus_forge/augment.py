"""Online augmentation of registered sample pairs.

One random transform is drawn per sample and applied identically to every
image and mask of the pair. Colour and intensity jitter only touches the
retinography, so the angiography target keeps its intensities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .data import SamplePair


@dataclass(frozen=True)
class AugmentParams:
    rotation: float = 15.0  # degrees, symmetric range
    scale: Tuple[float, float] = (0.9, 1.1)
    translation: float = 0.05  # fraction of the image width
    hflip: bool = True
    vflip: bool = True
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1
    hue: float = 0.02

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls(rotation=0.0, scale=(1.0, 1.0), translation=0.0, hflip=False, vflip=False,
                   brightness=0.0, contrast=0.0, hue=0.0)


@dataclass(frozen=True)
class Transform:
    matrix: np.ndarray  # output -> input coordinates, as scipy.ndimage.affine_transform expects
    offset: np.ndarray
    hflip: bool = False
    vflip: bool = False
    brightness: float = 0.0
    contrast: float = 0.0
    hue: float = 0.0

    @property
    def is_affine_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(2)) and not np.any(self.offset))


def draw_transform(params: AugmentParams, shape: Tuple[int, int], rng: np.random.Generator) -> Transform:
    """Draw one transform. The number of draws is fixed so rng streams stay aligned."""
    h, w = shape
    u = rng.uniform(-1, 1, size=7)
    flips = rng.random(2)
    theta = math.radians(params.rotation * u[0])
    lo, hi = params.scale
    s = lo + (hi - lo) * (u[1] + 1) / 2
    t = np.array([u[2], u[3]]) * params.translation * w
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    if theta == 0 and s == 1 and not t.any():
        matrix, offset = np.eye(2), np.zeros(2)
    else:
        rot_inv = np.array([[math.cos(theta), math.sin(theta)], [-math.sin(theta), math.cos(theta)]])
        matrix = rot_inv / s
        offset = c - matrix @ (c + t)
    return Transform(
        matrix=matrix,
        offset=offset,
        hflip=params.hflip and flips[0] < params.flip_prob,
        vflip=params.vflip and flips[1] < params.flip_prob,
        brightness=params.brightness * u[4],
        contrast=params.contrast * u[5],
        hue=params.hue * u[6],
    )


def apply_geometric(image: np.ndarray, tf: Transform, order: int) -> np.ndarray:
    """Warp a (C, H, W) array; ``order`` 1 is bilinear, 0 nearest."""
    out = image
    if not tf.is_affine_identity:
        src = image.astype(np.float64)
        out = np.stack([
            ndimage.affine_transform(ch, tf.matrix, tf.offset, order=order, mode="constant", cval=0.0)
            for ch in src
        ]).astype(image.dtype if image.dtype != bool else np.float64)
    if tf.hflip:
        out = out[:, :, ::-1]
    if tf.vflip:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def warp_mask(mask: np.ndarray, tf: Transform) -> np.ndarray:
    return apply_geometric(mask.astype(np.float64), tf, order=0) > 0.5


def jitter_colour(rgb: np.ndarray, roi: np.ndarray, tf: Transform) -> np.ndarray:
    if tf.hue == 0 and tf.brightness == 0 and tf.contrast == 0:
        return rgb
    x = rgb.astype(np.float64)
    if tf.hue:
        hsv = rgb_to_hsv(np.clip(np.moveaxis(x, 0, -1), 0, 1))
        hsv[..., 0] = (hsv[..., 0] + tf.hue) % 1.0
        x = np.moveaxis(hsv_to_rgb(hsv), -1, 0)
    inside = roi[0]
    mean = x[:, inside].mean(axis=1)[:, None, None] if inside.any() else 0.0
    x = ((x - mean) * (1 + tf.contrast) + mean) * (1 + tf.brightness)
    return (np.clip(x, 0, 1) * roi).astype(rgb.dtype)


def augment(sample: SamplePair, params: AugmentParams, rng: np.random.Generator,
            transform: Optional[Transform] = None) -> SamplePair:
    tf = transform or draw_transform(params, sample.size, rng)
    roi_r = warp_mask(sample.roi_retinography, tf)
    roi_a = warp_mask(sample.roi_angiography, tf)
    ret = apply_geometric(sample.retinography, tf, order=1)
    ang = apply_geometric(sample.angiography, tf, order=1)
    mask = None if sample.vessel_mask is None else warp_mask(sample.vessel_mask, tf)
    ret = jitter_colour(ret, roi_r, tf)
    return replace(sample, retinography=ret, angiography=ang, roi_retinography=roi_r,
                   roi_angiography=roi_a, vessel_mask=mask)
