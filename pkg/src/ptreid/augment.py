"""Image augmentation operators for generator (and optionally fusion) training.

Every operator maps an H x W x 3 float image in [0, 1] to an image of the
same shape and range, and is a deterministic function of (input, config,
rng state). The composed pipeline applies the operators in a fixed order:
flip, crop, rotate, jitter, distort, erase.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageops import resize_bilinear, rotate_image, warp_displacement


@dataclass(frozen=True)
class AugmentConfig:
    erase_prob: float = 0.5
    erase_area_frac: tuple[float, float] = (0.02, 0.2)
    crop_scale: tuple[float, float] = (0.8, 1.0)
    rotation_deg: float = 20.0
    jitter_strength: tuple[float, float] = (0.8, 1.2)
    flip_prob: float = 0.5
    distortion_strength: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("erase_area_frac", "crop_scale", "jitter_strength"):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo <= hi):
                raise ValueError(f"{name} must be an ordered non-negative range, got ({lo}, {hi})")
        for name in ("erase_prob", "flip_prob"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.rotation_deg < 0:
            raise ValueError("rotation_deg must be >= 0")
        if self.distortion_strength < 0:
            raise ValueError("distortion_strength must be >= 0")


def _clip01(image: np.ndarray) -> np.ndarray:
    return np.clip(image, 0.0, 1.0)


def horizontal_flip(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if rng.uniform() < cfg.flip_prob:
        return image[:, ::-1].copy()
    return image.copy()


def random_crop(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Crop a window at a scale drawn from crop_scale, resized back bilinearly."""
    h, w = image.shape[:2]
    min_h = int(round(h * cfg.crop_scale[0]))
    min_w = int(round(w * cfg.crop_scale[0]))
    if min_h < 8 or min_w < 8:
        raise ValueError(f"crop_scale min {cfg.crop_scale[0]} yields a window below 8x8 on {h}x{w}")
    scale = rng.uniform(cfg.crop_scale[0], cfg.crop_scale[1])
    ch = min(h, max(8, int(round(h * scale))))
    cw = min(w, max(8, int(round(w * scale))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    window = image[top : top + ch, left : left + cw]
    return _clip01(resize_bilinear(window, (h, w)))


def random_rotate(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    return _clip01(rotate_image(image, angle))


def color_jitter(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    factors = rng.uniform(cfg.jitter_strength[0], cfg.jitter_strength[1], size=3)
    return _clip01(image * factors[None, None, :]).astype(image.dtype, copy=False)


def random_distort(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Warp by a smooth random displacement field bounded by distortion_strength."""
    if cfg.distortion_strength <= 0:
        return image.copy()
    h, w = image.shape[:2]
    coarse = rng.uniform(-1.0, 1.0, size=(2, 4, 4, 1))
    dy = resize_bilinear(coarse[0], (h, w))[:, :, 0] * cfg.distortion_strength
    dx = resize_bilinear(coarse[1], (h, w))[:, :, 0] * cfg.distortion_strength
    return _clip01(warp_displacement(image, dy, dx))


def random_erase(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Fill a rectangle of a random area fraction with uniform noise."""
    if not (rng.uniform() < cfg.erase_prob):
        return image.copy()
    h, w = image.shape[:2]
    frac = rng.uniform(cfg.erase_area_frac[0], cfg.erase_area_frac[1])
    side = np.sqrt(frac)
    eh = min(h, max(1, int(round(h * side))))
    ew = min(w, max(1, int(round(w * side))))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    out = image.copy()
    out[top : top + eh, left : left + ew] = rng.uniform(0.0, 1.0, size=(eh, ew, 3))
    return out


PIPELINE = (horizontal_flip, random_crop, random_rotate, color_jitter, random_distort, random_erase)


def augment_image(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the full augmentation pipeline in its declared order."""
    out = image
    for op in PIPELINE:
        out = op(out, cfg, rng)
    return out.astype(np.float32, copy=False)
