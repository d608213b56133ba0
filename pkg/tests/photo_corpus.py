"""Haze-free natural photo crops drawn from images bundled with scikit-image,
scikit-learn and matplotlib (no network access needed)."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def _skimage(name):
    import skimage.data

    return getattr(skimage.data, name)()


def _motorcycle(side):
    import skimage.data

    left, right, _ = skimage.data.stereo_motorcycle()
    return left if side == 0 else right


def _sklearn(name):
    from sklearn.datasets import load_sample_image

    return load_sample_image(name)


def _matplotlib(name):
    import matplotlib

    path = os.path.join(matplotlib.get_data_path(), "sample_data", name)
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


TRAIN_SOURCES = {
    "astronaut": lambda: _skimage("astronaut"),
    "coffee": lambda: _skimage("coffee"),
    "rocket": lambda: _skimage("rocket"),
    "china": lambda: _sklearn("china.jpg"),
    "motorcycle_left": lambda: _motorcycle(0),
    "motorcycle_right": lambda: _motorcycle(1),
}
TEST_SOURCES = {
    "chelsea": lambda: _skimage("chelsea"),
    "flower": lambda: _sklearn("flower.jpg"),
    "grace_hopper": lambda: _matplotlib("grace_hopper.jpg"),
}


def _to_chw(img: np.ndarray) -> np.ndarray:
    return img[..., :3].transpose(2, 0, 1).astype(np.float32) / 255.0


def random_crops(sources: dict, count: int, size: int, seed: int) -> list[np.ndarray]:
    """``count`` random ``size x size`` crops (random rescale and flip) as (3, h, w) in [0, 1]."""
    rng = np.random.default_rng(seed)
    images = {k: f() for k, f in sorted(sources.items())}
    names = sorted(images)
    crops = []
    for i in range(count):
        img = images[names[i % len(names)]]
        h, w = img.shape[:2]
        s = rng.uniform(size / min(h, w), 1.0) if min(h, w) > size else 1.0
        if s < 1.0:
            nh, nw = max(size, int(round(h * s))), max(size, int(round(w * s)))
            img = np.asarray(Image.fromarray(img[..., :3]).resize((nw, nh), Image.BILINEAR))
            h, w = nh, nw
        y = rng.integers(h - size + 1)
        x = rng.integers(w - size + 1)
        c = img[y : y + size, x : x + size, :3]
        if rng.random() < 0.5:
            c = c[:, ::-1]
        crops.append(_to_chw(np.ascontiguousarray(c)))
    return crops
