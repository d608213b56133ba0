"""PSNR/SSIM scoring, depth-level patch statistics and learned-regularity histograms."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import haze
from .guided import box_filter

IDENTICAL = math.inf


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` marks identical inputs."""
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("psnr: peak must be positive")
    mse = float(np.mean(np.square(np.asarray(a, np.float64) - np.asarray(b, np.float64))))
    if mse == 0:
        return IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x, g):
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Single-scale SSIM on luminance with an 11x11, sigma=1.5 Gaussian window.

    Colour inputs ``(3, h, w)`` are converted to grayscale first; the score
    is the mean over window positions fully inside the image.
    """
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 3:
        a, b = haze.grayscale(a), haze.grayscale(b)
    if min(a.shape) < 11:
        raise ValueError("ssim: images must be at least 11x11")
    g = _gaussian_kernel()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a**2
    sbb = _filter_valid(b * b, g) - mu_b**2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    names: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def add(self, name, pred, target, label=""):
        self.names.append(name)
        self.psnr.append(psnr(pred, target))
        self.ssim.append(ssim(pred, target))
        self.labels.append(label)

    def mean_psnr(self, label=None) -> float:
        v = [p for p, l in zip(self.psnr, self.labels) if label is None or l == label]
        return float(np.mean(v)) if v else math.nan

    def mean_ssim(self, label=None) -> float:
        v = [s for s, l in zip(self.ssim, self.labels) if label is None or l == label]
        return float(np.mean(v)) if v else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "label", "psnr_db", "ssim"])
        for n, l, p, s in zip(self.names, self.labels, self.psnr, self.ssim):
            w.writerow([n, l, "identical" if p == IDENTICAL else f"{p:.4f}", f"{s:.6f}"])
        mp = self.mean_psnr()
        w.writerow(["MEAN", "", "identical" if mp == IDENTICAL else f"{mp:.4f}", f"{self.mean_ssim():.6f}"])
        return buf.getvalue()


# ---------------------------------------------------------------- histograms


@dataclass
class HistogramTable:
    bin_centers: np.ndarray
    counts: np.ndarray

    @property
    def frequencies(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else np.zeros(len(self.counts))

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.frequencies)

    def mass_below(self, nbins: int) -> float:
        return float(self.frequencies[:nbins].sum())

    def to_text(self) -> str:
        """Two-column (center, frequency) table, gnuplot-friendly."""
        lines = ["# center frequency count cumulative"]
        for c, f, n, cu in zip(self.bin_centers, self.frequencies, self.counts, self.cumulative):
            lines.append(f"{c:.6g} {f:.8f} {int(n)} {cu:.8f}")
        return "\n".join(lines) + "\n"


def unit_histogram(values: np.ndarray, bins: int = 20) -> HistogramTable:
    """Histogram over ``bins`` uniform bins on [0, 1]; values are clamped first."""
    v = np.clip(np.asarray(values, np.float64).ravel(), 0, 1)
    idx = np.minimum((v * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.int64)
    centers = (np.arange(bins) + 0.5) / bins
    return HistogramTable(bin_centers=centers, counts=counts)


def quantize_depth(depth: np.ndarray, levels: int = 10) -> np.ndarray:
    lo, hi = float(depth.min()), float(depth.max())
    if hi <= lo:
        return np.zeros(depth.shape, dtype=np.int64)
    q = np.floor((depth - lo) / (hi - lo) * levels).astype(np.int64)
    return np.minimum(q, levels - 1)


def depth_level_stats(
    depth_maps: Iterable[np.ndarray], patch: int = 128, levels: int = 10, stride: int = 32
) -> HistogramTable:
    """Histogram of the number of distinct quantized depth levels per patch."""
    counts = np.zeros(levels, dtype=np.int64)
    for d in depth_maps:
        h, w = d.shape
        if h < patch or w < patch:
            raise ValueError(f"depth map {d.shape} smaller than patch {patch}")
        q = quantize_depth(d, levels)
        ys = range(0, h - patch + 1, stride)
        xs = range(0, w - patch + 1, stride)
        for y in ys:
            for x in xs:
                n = len(np.unique(q[y : y + patch, x : x + patch]))
                counts[n - 1] += 1
    return HistogramTable(bin_centers=np.arange(1, levels + 1, dtype=np.float64), counts=counts)


STATISTICS = ("dark_channel", "one_minus_t", "one_minus_inv_khat")


def regularity_histogram(
    images: Iterable[np.ndarray],
    quantity: str = "dark_channel",
    provider: Callable[[np.ndarray], np.ndarray] | None = None,
    patch: int = 7,
    bins: int = 20,
) -> HistogramTable:
    """Per-pixel statistic over 7x7 patches, pooled over all images.

    ``dark_channel`` uses the patch minimum; for ``one_minus_t`` the provider
    returns an ``(h, w)`` transmission map and for ``one_minus_inv_khat`` a
    ``(3, h, w)`` K map whose channel mean is taken.  Provider statistics are
    averaged over the patch.
    """
    if quantity not in STATISTICS:
        raise ValueError(f"unknown statistic {quantity!r}; expected one of {STATISTICS}")
    if quantity != "dark_channel" and provider is None:
        raise ValueError(f"statistic {quantity!r} needs a provider")
    radius = (patch - 1) // 2
    values = []
    for img in images:
        h, w = img.shape[-2:]
        if quantity == "dark_channel":
            stat = haze.dark_channel(img, patch)
        elif quantity == "one_minus_t":
            t = np.asarray(provider(img), np.float64)
            if t.shape != (h, w):
                raise ValueError(f"transmission provider returned {t.shape}, expected {(h, w)}")
            stat = box_filter(1.0 - t, radius)
        else:
            K = np.asarray(provider(img), np.float64)
            if K.shape != (3, h, w):
                raise ValueError(f"K provider returned {K.shape}, expected {(3, h, w)}")
            khat = K.mean(axis=0)
            with np.errstate(divide="ignore"):
                inv = 1.0 / khat  # K -> 0+ sends the statistic to -inf, i.e. the lowest bin
            stat = box_filter(np.clip(1.0 - inv, 0, 1), radius)
        values.append(stat.ravel())
    return unit_histogram(np.concatenate(values), bins)
