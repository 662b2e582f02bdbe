"""Paired fundus samples: procedural generation, PNM file I/O and nested splits.

A dataset directory holds, for every identifier listed in ``manifest.txt``::

    <id>_ret.ppm       retinography, P6
    <id>_ang.pgm       angiography, P5
    <id>_roi_ret.pgm   retinography ROI, P5 with values {0, 255}
    <id>_roi_ang.pgm   angiography ROI
    <id>_mask.pgm      vessel mask (optional)
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class SamplePair:
    """One pixel-registered retinography/angiography record.

    Images are float32 in [0, 1] with shape (C, H, W); masks are bool (1, H, W).
    """

    identifier: str
    retinography: np.ndarray
    angiography: np.ndarray
    roi_retinography: np.ndarray
    roi_angiography: np.ndarray
    vessel_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        shapes = {
            "retinography": self.retinography.shape[1:],
            "angiography": self.angiography.shape[1:],
            "roi_retinography": self.roi_retinography.shape[1:],
            "roi_angiography": self.roi_angiography.shape[1:],
        }
        if self.vessel_mask is not None:
            shapes["vessel_mask"] = self.vessel_mask.shape[1:]
        if len(set(shapes.values())) != 1:
            detail = ", ".join(f"{k} {v[0]}x{v[1]}" for k, v in shapes.items())
            raise DataError(f"{self.identifier}: images are not pixel-registered ({detail})")
        if self.retinography.shape[0] != 3 or self.angiography.shape[0] != 1:
            raise DataError(f"{self.identifier}: need 3-channel retinography and 1-channel angiography")

    @property
    def size(self) -> Tuple[int, int]:
        return self.angiography.shape[1:]

    @property
    def labelled(self) -> bool:
        return self.vessel_mask is not None


def _quantize(x: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(x, 0, 1) * 255) / 255).astype(np.float32)


def _disc(shape, center, radius) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius**2


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return n / (n.std() + 1e-12)


def _grow_tree(rng, start, roi, size: int) -> List[Tuple[float, float, float]]:
    """Random branching walk; returns (row, col, radius) samples along the vessels."""
    points = []
    radius0 = max(0.9, 0.0125 * size)
    h, w = roi.shape
    cy, cx = h / 2, w / 2
    away = math.atan2(start[0] - cy, start[1] - cx) + math.pi
    base_angles = [away + a + rng.normal(0, 0.15) for a in (-1.2, -0.5, 0.5, 1.2)]
    stack = [(start[0], start[1], a + rng.normal(0, 0.15), radius0 * rng.uniform(0.85, 1.1), 0) for a in base_angles]
    while stack:
        y, x, ang, r, depth = stack.pop()
        seg_len = size * rng.uniform(0.1, 0.22)
        curl = rng.normal(0, 0.01)
        travelled = 0.0
        while travelled < seg_len:
            step = 0.5
            ang += curl + rng.normal(0, 0.04)
            y += step * math.sin(ang)
            x += step * math.cos(ang)
            travelled += step
            iy, ix = int(round(y)), int(round(x))
            if not (0 <= iy < h and 0 <= ix < w) or not roi[iy, ix]:
                break
            points.append((y, x, r))
        else:
            if depth < 4 and r * 0.8 >= 0.45:
                for sign in (-1, 1):
                    if depth > 0 and rng.random() < 0.25:
                        continue
                    child = r * rng.uniform(0.7, 0.85)
                    stack.append((y, x, ang + sign * rng.uniform(0.35, 0.8), child, depth + 1))
    return points


def _rasterize(points, shape) -> np.ndarray:
    """Per-pixel max of (radius - distance) over all vessel samples."""
    depth = np.full(shape, -np.inf)
    h, w = shape
    for y, x, r in points:
        reach = int(math.ceil(r + 1))
        y0, y1 = max(int(y) - reach, 0), min(int(y) + reach + 2, h)
        x0, x1 = max(int(x) - reach, 0), min(int(x) + reach + 2, w)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d = r - np.hypot(yy - y, xx - x)
        np.maximum(depth[y0:y1, x0:x1], d, out=depth[y0:y1, x0:x1])
    return depth


def synth_generate(seed: int, size: Tuple[int, int] = (128, 128), pathology_level: float = 0.0,
                   identifier: Optional[str] = None) -> SamplePair:
    """Render a synthetic registered retinography/angiography/vessel triplet.

    Deterministic in ``seed``. Images are quantized to 8 bits so they survive
    a PNM round trip unchanged.
    """
    h, w = size
    if h < 64 or w < 64:
        raise ValueError(f"synthetic images need at least 64x64 pixels, got {h}x{w}")
    if not 0 <= pathology_level <= 1:
        raise ValueError(f"pathology_level must lie in [0, 1], got {pathology_level}")
    rng = np.random.default_rng(seed)
    m = min(h, w)
    center = (h / 2 + rng.uniform(-0.02, 0.02) * m, w / 2 + rng.uniform(-0.02, 0.02) * m)
    radius = 0.46 * m
    roi_ret = _disc((h, w), center, radius)
    shift = rng.uniform(-0.02, 0.02, size=2) * m
    roi_ang = _disc((h, w), (center[0] + shift[0], center[1] + shift[1]), radius * 0.97)
    rows = np.arange(h)[:, None]
    roi_ang &= np.abs(rows - center[0]) <= 0.9 * radius

    side = rng.choice([-1, 1])
    disc_center = (center[0] + rng.uniform(-0.08, 0.08) * radius, center[1] + side * 0.45 * radius)
    fovea = (center[0] + rng.uniform(-0.05, 0.05) * radius, center[1] - side * 0.15 * radius)

    depth = _rasterize(_grow_tree(rng, disc_center, roi_ret, m), (h, w))
    mask = (depth >= 0) & roi_ret
    coverage = np.clip(depth + 0.5, 0, 1) * roi_ret
    # thin vessels are fainter in the colour image
    width_gain = np.clip(ndimage.maximum_filter(np.where(mask, depth, 0), size=3) / 1.2, 0.6, 1.0)

    yy, xx = np.mgrid[:h, :w]
    rad2 = ((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / radius**2
    disc_blob = np.exp(-((yy - disc_center[0]) ** 2 + (xx - disc_center[1]) ** 2) / (2 * (0.09 * radius) ** 2))
    fovea_blob = np.exp(-((yy - fovea[0]) ** 2 + (xx - fovea[1]) ** 2) / (2 * (0.18 * radius) ** 2))

    base = np.array([0.78, 0.40, 0.17]) * rng.uniform(0.85, 1.1)
    illum = 1 - 0.35 * rad2 - 0.25 * fovea_blob
    ret = np.empty((3, h, w))
    for c in range(3):
        ret[c] = base[c] * illum * (1 + 0.08 * _smooth_noise(rng, (h, w), m / 6))
    ret += np.array([0.25, 0.35, 0.25])[:, None, None] * disc_blob
    contrast = np.array([0.30, 0.50, 0.35]) * rng.uniform(0.8, 1.1)
    ret *= 1 - contrast[:, None, None] * (coverage * width_gain)[None]

    ang_bg = 0.12 + 0.05 * _smooth_noise(rng, (h, w), m / 10) + 0.12 * np.exp(-rad2 * 2)
    ang = np.clip(ang_bg, 0.02, 0.45) * (1 - 0.6 * fovea_blob)
    ang = ang + (1 - ang) * coverage

    n_lesions = int(round(pathology_level * 12))
    for _ in range(n_lesions):
        while True:
            ly, lx = rng.uniform(0, h), rng.uniform(0, w)
            if roi_ret[int(ly), int(lx)]:
                break
        lr = rng.uniform(0.012, 0.035) * m
        blob = np.exp(-((yy - ly) ** 2 + (xx - lx) ** 2) / (2 * lr**2))
        if rng.random() < 0.5:  # exudate: bright yellow in colour, invisible in angiography
            ret += np.array([0.35, 0.30, 0.05])[:, None, None] * blob
        else:  # haemorrhage: dark in both modalities
            ret *= 1 - 0.55 * blob[None]
            ang *= 1 - 0.6 * blob

    ret += rng.normal(0, 0.015, size=ret.shape)
    ang += rng.normal(0, 0.01, size=ang.shape)
    ret = _quantize(ret * roi_ret[None])
    ang = np.where(coverage >= 1, 1.0, np.clip(ang, 0, 0.99)) * roi_ang
    return SamplePair(
        identifier=identifier or f"synth{seed}",
        retinography=ret,
        angiography=_quantize(ang)[None],
        roi_retinography=roi_ret[None],
        roi_angiography=roi_ang[None],
        vessel_mask=mask[None],
    )


def derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synth_dataset(seed: int, count: int, size=(128, 128), pathology: Optional[float] = None,
                  prefix: str = "s") -> List[SamplePair]:
    """``count`` samples with per-sample seeds derived from ``seed``.

    Without an explicit ``pathology`` level, every other sample is
    pathological with a random level in [0.3, 1].
    """
    out = []
    for i in range(count):
        s = derive_seed(seed, i)
        if pathology is None:
            level = float(np.random.default_rng(s).uniform(0.3, 1.0)) if i % 2 else 0.0
        else:
            level = pathology
        out.append(synth_generate(s, size, level, identifier=f"{prefix}{i:03d}"))
    return out


# PNM codec ---------------------------------------------------------------------

def write_pnm(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] (or uint8) as binary P5 (H, W) or P6 (3, H, W)."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr.astype(np.float64), 0, 1) * 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        magic, body = b"P5", arr
    elif arr.ndim == 3 and arr.shape[0] == 3:
        magic, body = b"P6", np.moveaxis(arr, 0, -1)
    else:
        raise ValueError(f"cannot store image of shape {arr.shape} as PNM")
    h, w = body.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(body).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read binary P5/P6 (8-bit) into float32 (C, H, W) in [0, 1]."""
    raw = Path(path).read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos : pos + 1] == b"#":
                while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif raw[pos : pos + 1].isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header at byte {start}")
        return raw[start:pos], start

    magic, off = token()
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported magic {magic!r} at byte {off}")
    values = []
    for label in ("width", "height", "maxval"):
        tok, off = token()
        if not tok.isdigit() or int(tok) <= 0:
            raise DataError(f"{path}: invalid {label} {tok!r} at byte {off}")
        values.append(int(tok))
    w, h, maxval = values
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit images are supported (maxval {maxval} at byte {off})")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise DataError(f"{path}: missing whitespace after header at byte {pos}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    if len(raw) - pos < need:
        raise DataError(f"{path}: pixel data truncated at byte {len(raw)} (expected {need} bytes from byte {pos})")
    pix = np.frombuffer(raw, dtype=np.uint8, count=need, offset=pos).reshape(h, w, channels)
    return (np.moveaxis(pix, -1, 0).astype(np.float32) / maxval).astype(np.float32)


def derive_roi(image: np.ndarray) -> np.ndarray:
    """Largest disc inscribed in the non-black area, thresholded from the corners."""
    gray = image.mean(axis=0)
    h, w = gray.shape
    k = max(2, min(h, w) // 16)
    corners = np.concatenate([gray[:k, :k].ravel(), gray[:k, -k:].ravel(), gray[-k:, :k].ravel(), gray[-k:, -k:].ravel()])
    threshold = corners.mean() + 3 * corners.std() + 2 / 255
    fg = gray > threshold
    if not fg.any():
        raise DataError("cannot derive ROI: image is entirely dark")
    dist = ndimage.distance_transform_edt(fg)
    cy, cx = np.unravel_index(np.argmax(dist), dist.shape)
    return _disc((h, w), (cy, cx), dist[cy, cx])[None]


def _read_mask(path) -> np.ndarray:
    return read_pnm(path) >= 0.5


def load_pair(retinography, angiography, roi_retinography=None, roi_angiography=None,
              vessel_mask=None, identifier: Optional[str] = None) -> SamplePair:
    """Load one registered pair from PNM files; missing ROIs are derived."""
    ident = identifier or Path(retinography).name.split("_ret")[0]
    ret = read_pnm(retinography)
    ang = read_pnm(angiography)
    if ret.shape[0] != 3:
        raise DataError(f"{retinography}: retinography must be a colour (P6) image")
    files = {"retinography": (retinography, ret), "angiography": (angiography, ang)}
    roi_r = _read_mask(roi_retinography) if roi_retinography and os.path.exists(roi_retinography) else None
    roi_a = _read_mask(roi_angiography) if roi_angiography and os.path.exists(roi_angiography) else None
    mask = _read_mask(vessel_mask) if vessel_mask and os.path.exists(vessel_mask) else None
    for label, path, arr in (("roi_retinography", roi_retinography, roi_r), ("roi_angiography", roi_angiography, roi_a),
                             ("vessel_mask", vessel_mask, mask)):
        if arr is not None:
            files[label] = (path, arr)
    sizes = {label: arr.shape[1:] for label, (_, arr) in files.items()}
    if len(set(sizes.values())) != 1:
        detail = ", ".join(f"{files[k][0]} is {v[1]}x{v[0]}" for k, v in sizes.items())
        raise DataError(f"{ident}: dimension mismatch: {detail}")
    if roi_r is None:
        roi_r = derive_roi(ret)
    if roi_a is None:
        roi_a = derive_roi(ang)
    if mask is not None and np.any(mask & ~roi_r):
        logger.warning("%s: vessel mask extends outside the retinography ROI; clipping", ident)
        mask = mask & roi_r
    return SamplePair(ident, ret, ang, roi_r, roi_a, mask)


def sample_paths(directory, identifier: str) -> Dict[str, str]:
    d = Path(directory)
    return {
        "retinography": str(d / f"{identifier}_ret.ppm"),
        "angiography": str(d / f"{identifier}_ang.pgm"),
        "roi_retinography": str(d / f"{identifier}_roi_ret.pgm"),
        "roi_angiography": str(d / f"{identifier}_roi_ang.pgm"),
        "vessel_mask": str(d / f"{identifier}_mask.pgm"),
    }


def save_dataset(directory, samples: Sequence[SamplePair]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        p = sample_paths(d, s.identifier)
        write_pnm(p["retinography"], s.retinography)
        write_pnm(p["angiography"], s.angiography)
        write_pnm(p["roi_retinography"], s.roi_retinography[0].astype(np.float32))
        write_pnm(p["roi_angiography"], s.roi_angiography[0].astype(np.float32))
        if s.vessel_mask is not None:
            write_pnm(p["vessel_mask"], s.vessel_mask[0].astype(np.float32))
    (d / MANIFEST).write_text("".join(f"{s.identifier}\n" for s in samples), encoding="utf-8")


def load_dataset(directory) -> List[SamplePair]:
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.exists():
        raise DataError(f"{d}: no {MANIFEST}")
    ids = [line.strip() for line in manifest.read_text(encoding="utf-8").splitlines() if line.strip()]
    return [load_pair(identifier=i, **sample_paths(d, i)) for i in ids]


def nested_splits(dataset: Sequence, sizes: Sequence[int], seed: int) -> Dict[int, Tuple[list, list]]:
    """Nested training sets from one random permutation; the rest validates.

    Every smaller training set is contained in every larger one.
    """
    if any(s < 0 for s in sizes) or (sizes and max(sizes) > len(dataset)):
        raise ValueError(f"split sizes {list(sizes)} exceed pool of {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    out = {}
    for s in sizes:
        out[s] = ([dataset[i] for i in order[:s]], [dataset[i] for i in order[s:]])
    return out


def vessel_fraction(sample: SamplePair) -> float:
    roi = sample.roi_retinography
    return float((sample.vessel_mask & roi).sum() / roi.sum())
