"""Image metrics."""

from __future__ import annotations

import numpy as np


def _pair(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if mask is None:
        return a, b
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:mask.ndim]:
        raise ValueError(f"mask shape {mask.shape} does not match image {a.shape}")
    return a[mask], b[mask]


def mse(a, b, mask=None) -> float:
    a, b = _pair(a, b, mask)
    if a.size == 0:
        raise ValueError("mse over an empty selection")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, mask=None) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; ``inf`` when identical."""
    err = mse(a, b, mask)
    return float("inf") if err == 0 else float(10.0 * np.log10(1.0 / err))
