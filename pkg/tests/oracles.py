"""Slow reference implementations used as test oracles."""

import numpy as np


def reflect_index(i, n):
    # numpy 'reflect' padding: -1 -> 1, n -> n - 2
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i >= n else i


def naive_ssim(x, y, sigma=1.5, r=5, c1=1e-4, c2=9e-4):
    """Per-pixel double loop over a Gaussian window with reflective borders."""
    t = np.arange(-r, r + 1)
    g = np.exp(-(t**2) / (2 * sigma**2))
    g /= g.sum()
    w2 = np.outer(g, g)
    h, wd = x.shape
    out = np.zeros((h, wd))
    for i in range(h):
        for j in range(wd):
            mx = my = sxx = syy = sxy = 0.0
            for u in range(-r, r + 1):
                for v in range(-r, r + 1):
                    a = x[reflect_index(i + u, h), reflect_index(j + v, wd)]
                    b = y[reflect_index(i + u, h), reflect_index(j + v, wd)]
                    k = w2[u + r, v + r]
                    mx += k * a
                    my += k * b
                    sxx += k * a * a
                    syy += k * b * b
                    sxy += k * a * b
            vx, vy, cov = sxx - mx * mx, syy - my * my, sxy - mx * my
            out[i, j] = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return out


def brute_force_curves(scores, labels):
    """Confusion counts at every distinct threshold by direct enumeration, highest first."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    thresholds = np.unique(s)[::-1]
    tp = np.array([np.sum(y & (s >= t)) for t in thresholds])
    fp = np.array([np.sum(~y & (s >= t)) for t in thresholds])
    return thresholds, tp, fp
