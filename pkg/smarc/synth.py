"""
Procedural four-class surface textures for desk-scale runs.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from smarc.dataset import DEFAULT_FRACTION, Dataset, central_mask
from smarc.utils import rng_stream

SYNTH_CLASSES = ("concrete", "grass", "rock", "wood")


def _normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def _tint(gray: np.ndarray, dark, light) -> np.ndarray:
    dark, light = np.asarray(dark, dtype=np.float64), np.asarray(light, dtype=np.float64)
    return dark + gray[..., None] * (light - dark)


def _concrete(size: int, rng: np.random.Generator) -> np.ndarray:
    base = 0.55 + 0.03 * rng.standard_normal((size, size))
    speck = rng.random((size, size)) < 0.02
    base[speck] -= 0.25
    img = np.repeat(base[..., None], 3, axis=-1) + np.array([0.02, 0.02, 0.0])
    return img


def _grass(size: int, rng: np.random.Generator) -> np.ndarray:
    blades = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=(2.5, 0.4))
    g = _normalize(blades)
    return _tint(g, (0.10, 0.30, 0.05), (0.45, 0.80, 0.30))


def _rock(size: int, rng: np.random.Generator) -> np.ndarray:
    smooth = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=max(1.0, size / 12))
    blobs = (smooth > 0).astype(np.float64)
    grain = 0.08 * rng.standard_normal((size, size))
    g = np.clip(0.35 + 0.35 * blobs + grain, 0.0, 1.0)
    return _tint(g, (0.25, 0.22, 0.20), (0.70, 0.66, 0.62))


def _wood(size: int, rng: np.random.Generator) -> np.ndarray:
    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    period = size / rng.uniform(3.0, 5.0)
    jitter = ndimage.gaussian_filter1d(rng.standard_normal(size), sigma=max(1.0, size / 8)) * 3.0
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (rows + jitter[None, :] + 0.1 * cols) / period + rng.uniform(0, 2 * np.pi))
    g = np.clip(stripes + 0.05 * rng.standard_normal((size, size)), 0.0, 1.0)
    return _tint(g, (0.35, 0.20, 0.08), (0.75, 0.52, 0.30))


_GENERATORS = {"concrete": _concrete, "grass": _grass, "rock": _rock, "wood": _wood}


def synth_textures(n_per_class: int, size: int, seed: int = 42, visible_fraction: float = DEFAULT_FRACTION) -> Dataset:
    """
    n_per_class images of each class (labels grouped by class, class order
    concrete, grass, rock, wood), each with the central mask. Bitwise
    deterministic in `seed`.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    images, labels, paths = [], [], []
    for label, name in enumerate(SYNTH_CLASSES):
        for i in range(n_per_class):
            rng = rng_stream(seed, label, i)
            img = np.clip(_GENERATORS[name](size, rng), 0.0, 1.0).astype(np.float32)
            images.append(img)
            labels.append(label)
            paths.append(f"synthetic/{name}/{i:05d}")
    mask = central_mask(size, visible_fraction)
    n = len(images)
    return Dataset(
        np.stack(images),
        np.broadcast_to(mask, (n,) + mask.shape).astype(np.float32),
        np.asarray(labels, dtype=np.int64),
        paths,
        list(SYNTH_CLASSES),
    )
