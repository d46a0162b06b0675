"""Independent reference implementations used by the tests.

Written as plain per-pixel loops so they share no code with the package.
"""

import math

import numpy as np


def warp_oracle(image, disparity, direction):
    """image [C,H,W], disparity [H,W] as numpy arrays."""
    c, h, w = image.shape
    out = np.zeros_like(image, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            x = j + direction * disparity[i, j] * w
            x = min(max(x, 0.0), w - 1.0)
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, w - 1)
            t = x - x0
            for ch in range(c):
                out[ch, i, j] = (1 - t) * image[ch, i, x0] + t * image[ch, i, x1]
    return out


def metrics_oracle(pred, gt, cap=80.0, floor=1e-3):
    """Loop-based metrics over pixels with gt > 0."""
    vals = {k: 0.0 for k in ("abs", "sq", "se", "lse", "d1", "d2", "d3")}
    n = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if not g > 0:
            continue
        p = min(max(float(p), floor), cap)
        g = float(g)
        n += 1
        vals["abs"] += abs(p - g) / g
        vals["sq"] += (p - g) ** 2 / g
        vals["se"] += (p - g) ** 2
        vals["lse"] += (math.log(p) - math.log(g)) ** 2
        r = max(p / g, g / p)
        vals["d1"] += r < 1.25
        vals["d2"] += r < 1.25 ** 2
        vals["d3"] += r < 1.25 ** 3
    return {
        "ard": vals["abs"] / n,
        "srd": vals["sq"] / n,
        "rmse": math.sqrt(vals["se"] / n),
        "log_rmse": math.sqrt(vals["lse"] / n),
        "d1": vals["d1"] / n,
        "d2": vals["d2"] / n,
        "d3": vals["d3"] / n,
    }


def random_fractional_disparity(rng, shape, width, low=0.2, high=0.8, max_px=None):
    """Disparities whose pixel offset has a fractional part in [low, high].

    Keeps finite differences away from the kinks of bilinear interpolation.
    """
    max_px = max_px if max_px is not None else width // 2
    whole = rng.integers(0, max_px, size=shape)
    frac = rng.uniform(low, high, size=shape)
    return (whole + frac) / width
