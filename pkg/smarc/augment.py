"""
Training-time augmentation. Rotation and flips move image and mask together;
photometric changes and noise touch the image only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from smarc.config import AugmentSpec
from smarc.dataset import Sample


@dataclass(frozen=True)
class AugmentDraw:
    rotation_k: int = 0
    hflip: bool = False
    vflip: bool = False
    brightness: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    noise_sigma: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self == AugmentDraw()


def draw_augment(spec: AugmentSpec, rng: np.random.Generator) -> AugmentDraw:
    """Sample one set of transform parameters; the draw order is fixed."""
    return AugmentDraw(
        rotation_k=int(rng.choice(spec.rotation_ks)),
        hflip=bool(rng.random() < spec.hflip_prob),
        vflip=bool(rng.random() < spec.vflip_prob),
        brightness=float(rng.uniform(-spec.brightness_delta, spec.brightness_delta)),
        contrast=float(rng.uniform(*spec.contrast_range)),
        saturation=float(rng.uniform(*spec.saturation_range)),
        noise_sigma=float(rng.uniform(0.0, spec.noise_sigma_max)),
    )


def geometric(arr: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Rotation by k * 90 degrees, then horizontal and vertical flips (H x W x C)."""
    out = arr
    if draw.rotation_k % 4:
        out = np.rot90(out, k=draw.rotation_k, axes=(0, 1))
    if draw.hflip:
        out = out[:, ::-1]
    if draw.vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


def photometric(image: np.ndarray, draw: AugmentDraw, rng: np.random.Generator | None = None) -> np.ndarray:
    out = image.astype(np.float32, copy=True)
    if draw.brightness:
        out += np.float32(draw.brightness)
    if draw.contrast != 1.0:
        mean = out.mean(axis=(0, 1), keepdims=True)
        out = (out - mean) * np.float32(draw.contrast) + mean
    if draw.saturation != 1.0:
        gray = out.mean(axis=-1, keepdims=True)
        out = (out - gray) * np.float32(draw.saturation) + gray
    if draw.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 needs an rng")
        out += rng.normal(0.0, draw.noise_sigma, size=out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def augment(sample: Sample, draw: AugmentDraw, rng: np.random.Generator | None = None) -> Sample:
    """Apply `draw`; the identity draw returns the sample unchanged."""
    if draw.is_identity:
        return sample
    image = geometric(sample.image, draw)
    mask = geometric(sample.mask, draw)
    image = photometric(image, draw, rng)
    return Sample(image, mask, sample.label, sample.source_path)
