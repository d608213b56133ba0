"""Hazy/clear pair synthesis, procedural depth and the TSV dataset manifest."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import haze
from .files import atomic_write_text, list_images, load_image, save_image

MANIFEST_COLUMNS = ("split", "clear", "hazy", "transmission", "depth", "beta", "A")
SPLITS = ("train", "val", "test")


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FAMED_THREADS", "1")))
    except ValueError:
        return 1


def procedural_depth(h: int, w: int, seed: int) -> np.ndarray:
    """Smoothed random multi-plane depth plus a linear ramp, normalized to [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)

    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)

    planes = np.zeros((h, w))
    for _ in range(rng.integers(2, 5)):
        phi = rng.uniform(0, 2 * np.pi)
        cut = rng.uniform(0.2, 0.8)
        side = (np.cos(phi) * xx + np.sin(phi) * yy - np.cos(phi) * 0.5 - np.sin(phi) * 0.5 + 0.5) > cut
        planes += rng.uniform(-0.5, 0.5) * side
    planes = ndimage.gaussian_filter(planes, sigma=0.02 * max(h, w))

    d = 0.7 * ramp + 0.3 * planes + 0.05 * ndimage.gaussian_filter(rng.standard_normal((h, w)), 0.05 * max(h, w))
    d -= d.min()
    return d / max(d.max(), 1e-12)


@dataclass
class SynthConfig:
    beta_range: tuple = (0.6, 1.8)
    A_range: tuple = (0.7, 1.0)
    splits: tuple = (0.75, 0.0, 0.25)
    seed: int = 0
    depth_dir: str | None = None

    def __post_init__(self):
        lo, hi = self.beta_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid beta range {self.beta_range}")
        lo, hi = self.A_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"invalid atmospheric light range {self.A_range}")
        if len(self.splits) != 3 or any(f < 0 for f in self.splits) or sum(self.splits) <= 0:
            raise ValueError(f"invalid split fractions {self.splits}")


@dataclass
class ManifestEntry:
    split: str
    clear: Path
    hazy: Path
    transmission: Path
    depth: str  # a depth-map path or "procedural:<seed>"
    beta: float
    A: float


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path = Path(".")

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in self.entries:
            w.writerow([
                e.split, _rel(e.clear, self.root), _rel(e.hazy, self.root), _rel(e.transmission, self.root),
                e.depth, repr(float(e.beta)), repr(float(e.A)),
            ])
        return buf.getvalue()

    def save(self, path) -> None:
        self.root = Path(path).parent
        atomic_write_text(path, self.to_tsv())

    @classmethod
    def load(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        root = path.parent
        with open(path, encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f, delimiter="\t"))
        if not rows or tuple(rows[0]) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: not a dataset manifest (bad header)")
        entries = []
        for i, row in enumerate(rows[1:], start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise ValueError(f"{path}:{i}: expected {len(MANIFEST_COLUMNS)} columns, got {len(row)}")
            split, clear, hazy, trans, depth, beta, A = row
            if split not in SPLITS:
                raise ValueError(f"{path}:{i}: unknown split {split!r}")
            e = ManifestEntry(split, root / clear, root / hazy, root / trans, depth, float(beta), float(A))
            if check_files:
                for p in (e.clear, e.hazy):
                    if not p.exists():
                        raise FileNotFoundError(f"{path}:{i}: referenced file {p} does not exist")
            entries.append(e)
        return cls(entries=entries, root=root)

    def pairs(self, split: str = "train") -> list:
        """Load (hazy, clear) arrays for a split."""
        return [(load_image(e.hazy), load_image(e.clear)) for e in self.split(split)]


def _rel(p: Path, root: Path) -> str:
    try:
        return os.path.relpath(p, root)
    except ValueError:
        return str(p)


def _assign_splits(n: int, fractions, rng) -> list:
    f = np.asarray(fractions, dtype=np.float64)
    f = f / f.sum()
    counts = np.floor(f * n + 0.5).astype(int)
    counts[0] = n - counts[1:].sum()
    labels = [s for s, c in zip(SPLITS, counts) for _ in range(c)]
    order = rng.permutation(n)
    out = [None] * n
    for pos, i in enumerate(order):
        out[i] = labels[pos]
    return out


def synthesize_dataset(clear_dir, config: SynthConfig, out_dir) -> DatasetManifest:
    """Render hazy images and transmission maps for every clear image; write ``manifest.tsv``."""
    clear_paths = list_images(clear_dir)
    if not clear_paths:
        raise ValueError(f"{clear_dir}: no PNG/PPM images found")
    out = Path(out_dir)
    rng = np.random.default_rng(config.seed)
    n = len(clear_paths)
    betas = rng.uniform(*config.beta_range, size=n)
    As = rng.uniform(*config.A_range, size=n)
    depth_seeds = rng.integers(0, 2**31 - 1, size=n)
    splits = _assign_splits(n, config.splits, rng)

    def render(i):
        src = clear_paths[i]
        J = load_image(src).astype(np.float64)
        h, w = J.shape[1:]
        depth_path = Path(config.depth_dir) / f"{src.stem}.npy" if config.depth_dir else None
        if depth_path is not None and depth_path.exists():
            depth = np.load(depth_path).astype(np.float64)
            if depth.shape != (h, w):
                raise ValueError(f"{depth_path}: depth shape {depth.shape} does not match image {(h, w)}")
            depth_ref = str(depth_path)
        else:
            depth = procedural_depth(h, w, int(depth_seeds[i]))
            depth_ref = f"procedural:{int(depth_seeds[i])}"
        t = haze.transmission_from_depth(depth, float(betas[i]))
        I = haze.synthesize_hazy(J, t, float(As[i]))
        hazy_path = out / "hazy" / f"{src.stem}.png"
        trans_path = out / "transmission" / f"{src.stem}.png"
        save_image(I, hazy_path)
        save_image(np.repeat(t[None], 3, axis=0), trans_path)
        return ManifestEntry(splits[i], src.resolve(), hazy_path.resolve(), trans_path.resolve(),
                             depth_ref, float(betas[i]), float(As[i]))

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            entries = list(ex.map(render, range(n)))
    else:
        entries = [render(i) for i in range(n)]
    manifest = DatasetManifest(entries=entries, root=out.resolve())
    manifest.save(out / "manifest.tsv")
    return manifest


def depth_for_entry(entry: ManifestEntry, shape) -> np.ndarray:
    if entry.depth.startswith("procedural:"):
        return procedural_depth(*shape, int(entry.depth.split(":", 1)[1]))
    return np.load(entry.depth)
