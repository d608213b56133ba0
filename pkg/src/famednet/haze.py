"""Atmospheric scattering model, K reformulation, dark channel and a DCP baseline.

Images are ``(3, h, w)`` arrays (or ``(n, 3, h, w)`` batches) with values in
[0, 1]; transmission and depth maps are ``(h, w)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

DEFAULT_EPS_DEN = 1e-3


@dataclass
class HazeParams:
    A: np.ndarray
    beta: float
    depth: np.ndarray

    def __post_init__(self):
        self.A = np.broadcast_to(np.asarray(self.A, dtype=np.float64), (3,)).copy()
        if np.any(self.A < 0) or np.any(self.A > 1):
            raise ValueError(f"atmospheric light must lie in [0, 1], got {self.A}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")

    def transmission(self) -> np.ndarray:
        return transmission_from_depth(self.depth, self.beta)


def _color(A, ndim: int) -> np.ndarray:
    A = np.broadcast_to(np.asarray(A, dtype=np.float64), (3,))
    return A.reshape((3,) + (1,) * (ndim - 1)) if ndim == 3 else A.reshape(1, 3, 1, 1)


def _channel_axis(x) -> int:
    if x.ndim == 3:
        return 0
    if x.ndim == 4:
        return 1
    raise ValueError(f"expected a (3, h, w) image or (n, 3, h, w) batch, got shape {x.shape}")


def transmission_from_depth(depth: np.ndarray, beta: float) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if np.any(depth < 0):
        raise ValueError("depth must be non-negative")
    return np.exp(-beta * depth)


def synthesize_hazy(J: np.ndarray, t: np.ndarray, A) -> np.ndarray:
    """I = J t + A (1 - t)."""
    _channel_axis(J)
    t = np.asarray(t)
    if t.shape != J.shape[-2:]:
        raise ValueError(f"transmission shape {t.shape} does not match image {J.shape}")
    A = _color(A, J.ndim)
    return J * t + A * (1 - t)


def k_from_scene(I: np.ndarray, t: np.ndarray, A, eps_den: float = DEFAULT_EPS_DEN) -> np.ndarray:
    """Analytic K map; the I = 1 singularity is avoided with a signed clamp."""
    _channel_axis(I)
    t = np.asarray(t, dtype=np.float64)
    if eps_den <= 0:
        raise ValueError("eps_den must be positive")
    if np.any(t <= 0):
        raise ValueError("transmission must be strictly positive to compute K")
    A = _color(A, I.ndim)
    num = (I - A) / t + (A - 1)
    den = I - 1.0
    den = np.where(den >= 0, 1.0, -1.0) * np.maximum(np.abs(den), eps_den)
    return num / den


def recover_radiance(I: np.ndarray, K: np.ndarray, clamp: bool = True) -> np.ndarray:
    """J = K I - K + 1."""
    if I.shape != K.shape:
        raise ValueError(f"K shape {K.shape} does not match image {I.shape}")
    J = K * (I - 1) + 1
    return np.clip(J, 0, 1) if clamp else J


def _check_patch(patch: int):
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch size must be a positive odd integer, got {patch}")


def dark_channel(image: np.ndarray, patch: int = 15) -> np.ndarray:
    """Channel minimum followed by a ``patch x patch`` minimum (edge-clamped)."""
    _check_patch(patch)
    if image.ndim == 2:
        cmin = image
    else:
        cmin = image.min(axis=_channel_axis(image))
    size = [1] * (cmin.ndim - 2) + [patch, patch]
    return ndimage.minimum_filter(cmin, size=size, mode="nearest")


@dataclass
class DCPResult:
    J: np.ndarray
    t: np.ndarray
    A: np.ndarray


def estimate_airlight(I: np.ndarray, dark: np.ndarray, top_fraction: float = 0.001) -> np.ndarray:
    """Mean colour of the input over the brightest ``top_fraction`` dark-channel pixels."""
    flat = dark.ravel()
    k = max(1, int(round(flat.size * top_fraction)))
    idx = np.argpartition(flat, flat.size - k)[flat.size - k :]
    pix = I.reshape(3, -1)[:, idx]
    A = pix.mean(axis=1)
    if not np.any(A > 0):
        A = I.reshape(3, -1).max(axis=1)
    return A


def dcp_baseline_dehaze(
    I: np.ndarray,
    omega: float = 0.95,
    patch: int = 15,
    t_floor: float = 0.1,
    top_fraction: float = 0.001,
) -> DCPResult:
    """Dark-channel-prior dehazing without transmission refinement."""
    if not 0 < omega <= 1:
        raise ValueError("omega must lie in (0, 1]")
    if not 0 < t_floor < 1:
        raise ValueError("t_floor must lie in (0, 1)")
    if I.ndim != 3 or I.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) image, got {I.shape}")
    I = I.astype(np.float64)
    A = estimate_airlight(I, dark_channel(I, patch), top_fraction)
    A_safe = np.maximum(A, 1e-6)
    t = 1.0 - omega * dark_channel(I / A_safe[:, None, None], patch)
    J = (I - A[:, None, None]) / np.maximum(t, t_floor) + A[:, None, None]
    return DCPResult(J=np.clip(J, 0, 1), t=t, A=A)


def grayscale(image: np.ndarray) -> np.ndarray:
    axis = _channel_axis(image)
    r, g, b = np.moveaxis(image, axis, 0)[:3]
    return 0.299 * r + 0.587 * g + 0.114 * b
