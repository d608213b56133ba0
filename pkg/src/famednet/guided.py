"""Box filter, guided filter and the subsampled fast guided filter (2-D maps)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import bilinear_resize


@dataclass(frozen=True)
class GuidedFilterParams:
    radius: int = 48
    eps: float = 1e-4
    downsample: int = 4

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("guided filter radius must be >= 1")
        if self.eps <= 0:
            raise ValueError("guided filter eps must be > 0")
        if self.downsample < 1:
            raise ValueError("guided filter downsample factor must be >= 1")


def _box_sum_axis(x: np.ndarray, r: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    c = np.cumsum(x, axis=axis, dtype=np.float64)
    pad = [(0, 0)] * x.ndim
    pad[axis] = (1, 0)
    c = np.pad(c, pad)
    hi = np.minimum(np.arange(n) + r + 1, n)
    lo = np.maximum(np.arange(n) - r, 0)
    return np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)


def box_sum(x: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the in-bounds part of each (2r+1)^2 window, via integral images."""
    if radius < 1:
        raise ValueError("box filter radius must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    return _box_sum_axis(_box_sum_axis(x, radius, x.ndim - 2), radius, x.ndim - 1)


def box_counts(h: int, w: int, radius: int) -> np.ndarray:
    """Number of in-bounds pixels in each window (separable, so exact in integers)."""
    if radius < 1:
        raise ValueError("box filter radius must be >= 1")
    rows = np.minimum(np.arange(h) + radius + 1, h) - np.maximum(np.arange(h) - radius, 0)
    cols = np.minimum(np.arange(w) + radius + 1, w) - np.maximum(np.arange(w) - radius, 0)
    return np.outer(rows, cols)


def box_filter(x: np.ndarray, radius: int) -> np.ndarray:
    """Mean over the in-bounds part of each (2r+1)^2 window."""
    s = box_sum(x, radius)
    return s / box_counts(*s.shape[-2:], radius)


def _coefficients(guide, src, radius, eps):
    mean_i = box_filter(guide, radius)
    mean_p = box_filter(src, radius)
    cov_ip = box_filter(guide * src, radius) - mean_i * mean_p
    var_i = box_filter(guide * guide, radius) - mean_i * mean_i
    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i
    return box_filter(a, radius), box_filter(b, radius)


def _check_dims(guide, src):
    if guide.shape != src.shape:
        raise ValueError(f"guide {guide.shape} and source {src.shape} dimensions differ")


def guided_filter(guide: np.ndarray, src: np.ndarray, radius: int, eps: float) -> np.ndarray:
    guide = np.asarray(guide, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    _check_dims(guide, src)
    if eps <= 0:
        raise ValueError("eps must be > 0")
    mean_a, mean_b = _coefficients(guide, src, radius, eps)
    return mean_a * guide + mean_b


def fast_guided_filter(
    guide: np.ndarray, src: np.ndarray, radius: int, eps: float, d: int
) -> np.ndarray:
    """Coefficients computed at 1/d resolution, composed with the full-resolution guide."""
    if d < 1:
        raise ValueError("downsample factor must be >= 1")
    guide = np.asarray(guide, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    _check_dims(guide, src)
    h, w = guide.shape
    r = radius // d
    if r < 1:
        warnings.warn(f"radius {radius} / downsample {d} < 1; clamping low-resolution radius to 1")
        r = 1
    lh, lw = max(1, int(np.floor(h / d + 0.5))), max(1, int(np.floor(w / d + 0.5)))
    g_lo = bilinear_resize(guide, lh, lw)
    p_lo = bilinear_resize(src, lh, lw)
    mean_a, mean_b = _coefficients(g_lo, p_lo, r, eps)
    mean_a = bilinear_resize(mean_a, h, w)
    mean_b = bilinear_resize(mean_b, h, w)
    return mean_a * guide + mean_b
