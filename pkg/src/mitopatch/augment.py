"""Geometric and photometric augmentation plus tensor standardization.

The training path applies, in order: stain normalization (when enabled),
a random square crop of ``crop_fraction`` times the shorter side, a random
dihedral move (quarter turns plus flips), brightness/contrast jitter,
bilinear resize to ``out_size``, scaling to [0, 1], and per-channel
standardization. The evaluation path only resizes and standardizes.
Image tensors are channel-major ``float64`` arrays of shape (3, h, w).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stain import StainParams, normalize_or_passthrough

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

CONTRAST_PIVOT = 127.5


@dataclass
class AugmentConfig:
    crop_fraction: float = 0.6
    out_size: int = 224
    # probability that a dihedral move is drawn at all; the draw itself is
    # a uniform quarter-turn plus independent coin-flip mirrors
    p_dihedral: float = 1.0
    brightness_range: tuple[float, float] = (0.8, 1.2)
    contrast_range: tuple[float, float] = (0.8, 1.2)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    # stain-normalization policy: training-path on, evaluation-path off
    normalize_train: bool = True
    normalize_eval: bool = False

    def __post_init__(self):
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must lie in (0, 1]")
        if self.out_size < 1:
            raise ValueError("out_size must be at least 1")
        if not 0 <= self.p_dihedral <= 1:
            raise ValueError("p_dihedral must lie in [0, 1]")
        for name in ("brightness_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must satisfy lo <= hi")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")


def random_crop_fraction(
    patch: np.ndarray, fraction: float, rng: np.random.Generator
) -> np.ndarray:
    """Square crop with side floor(fraction * min(h, w)) at a uniform offset.

    fraction == 1 returns the patch unchanged (also for non-square inputs).
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return patch
    h, w = patch.shape[:2]
    side = max(int(math.floor(fraction * min(h, w))), 1)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return np.ascontiguousarray(patch[top : top + side, left : left + side])


def dihedral(
    patch: np.ndarray, quarter_turns: int, flip_h: bool, flip_v: bool
) -> np.ndarray:
    """Rotate counterclockwise by quarter turns, then apply optional flips."""
    out = np.rot90(patch, k=quarter_turns % 4, axes=(0, 1))
    if flip_h:
        out = out[:, ::-1]
    if flip_v:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def brightness_contrast(patch: np.ndarray, b: float, c: float) -> np.ndarray:
    """v -> c * (b*v - 127.5) + 127.5, rounded and clamped to [0, 255]."""
    if b <= 0 or c <= 0:
        raise ValueError("brightness and contrast factors must be positive")
    vals = np.asarray(patch, dtype=np.float64)
    out = c * (b * vals - CONTRAST_PIVOT) + CONTRAST_PIVOT
    return np.clip(np.rint(out), 0.0, 255.0).astype(np.uint8)


def resize_bilinear(patch: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centered sampling.

    A same-size resize is the exact identity.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    h, w = patch.shape[:2]
    if (out_h, out_w) == (h, w):
        return patch.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    img = np.asarray(patch, dtype=np.float64)
    top = img[y0][:, x0] * (1.0 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1.0 - wx) + img[y1][:, x1] * wx
    out = top * (1.0 - wy) + bottom * wy
    return np.clip(np.rint(out), 0.0, 255.0).astype(np.uint8)


def standardize(
    patch: np.ndarray,
    mean: tuple[float, float, float],
    std: tuple[float, float, float],
) -> np.ndarray:
    """Scale to [0, 1] and standardize per channel; returns a (3, h, w) tensor."""
    arr = np.asarray(patch, dtype=np.float64) / 255.0
    arr = (arr - np.asarray(mean)) / np.asarray(std)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def train_transform(
    patch: np.ndarray,
    cfg: AugmentConfig,
    stain_params: StainParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Full stochastic training pipeline; a pure function of (patch, cfg, seed)."""
    out = patch
    if cfg.normalize_train:
        out, _ = normalize_or_passthrough(out, stain_params)
    out = random_crop_fraction(out, cfg.crop_fraction, rng)
    if cfg.p_dihedral > 0 and rng.random() < cfg.p_dihedral:
        quarter_turns = int(rng.integers(0, 4))
        flip_h = bool(rng.random() < 0.5)
        flip_v = bool(rng.random() < 0.5)
        out = dihedral(out, quarter_turns, flip_h, flip_v)
    b = float(rng.uniform(*cfg.brightness_range))
    c = float(rng.uniform(*cfg.contrast_range))
    out = brightness_contrast(out, b, c)
    out = resize_bilinear(out, cfg.out_size, cfg.out_size)
    return standardize(out, cfg.mean, cfg.std)


def eval_transform(
    patch: np.ndarray,
    cfg: AugmentConfig,
    stain_params: StainParams | None = None,
) -> np.ndarray:
    """Deterministic evaluation pipeline: resize and standardize only.

    Stain normalization participates only when ``cfg.normalize_eval`` is set.
    """
    out = patch
    if cfg.normalize_eval:
        out, _ = normalize_or_passthrough(out, stain_params or StainParams())
    out = resize_bilinear(out, cfg.out_size, cfg.out_size)
    return standardize(out, cfg.mean, cfg.std)
