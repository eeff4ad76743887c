"""Seeded per-epoch augmentation of (composite, mask) pairs.

Composites are (5, S, S) arrays with bands [red, green, blue, nir, chm] in
[0, 1]; masks are one-hot (N, S, S). Photometric ops never touch the mask.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .preprocess import Tile
from .raster import ClassMask

SPECTRAL = slice(0, 4)


@dataclass(frozen=True)
class AugmentConfig:
    flip_probability: float = 0.5
    brightness_contrast_limit: float = 0.10
    noise_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError(f"flip_probability must lie in [0, 1], got {self.flip_probability}")
        if self.brightness_contrast_limit < 0:
            raise ConfigError("brightness_contrast_limit must be non-negative")
        if not 0.0 <= self.noise_std < 1.0:
            raise ConfigError(f"noise_std must lie in [0, 1), got {self.noise_std}")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, seed)

    @property
    def active(self) -> bool:
        return bool(self.flip_probability or self.brightness_contrast_limit or self.noise_std)


def hflip(composite: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror both arrays about the vertical axis."""
    if composite.shape[-2:] != mask.shape[-2:]:
        raise ShapeError(f"composite {composite.shape} and mask {mask.shape} differ spatially")
    return composite[..., ::-1].copy(), mask[..., ::-1].copy()


def adjust_brightness_contrast(composite: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    """x' = clamp((x - 0.5)(1 + contrast) + 0.5 + brightness, 0, 1) on spectral bands."""
    out = composite.copy()
    x = out[SPECTRAL]
    out[SPECTRAL] = np.clip((x - 0.5) * (1.0 + contrast) + 0.5 + brightness, 0.0, 1.0)
    return out


def add_gaussian_noise(composite: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    if std < 0:
        raise ConfigError(f"noise std must be non-negative, got {std}")
    if std == 0:
        return composite.copy()
    noise = rng.normal(0.0, std, size=composite.shape)
    return np.clip(composite + noise, 0.0, 1.0).astype(composite.dtype)


def stream(seed: int, epoch: int, row: int, col: int) -> np.random.Generator:
    """Counter-style generator keyed by (seed, epoch, tile grid position)."""
    return np.random.default_rng([seed, epoch, row, col])


def augment_pair(
    composite: np.ndarray, mask: np.ndarray, config: AugmentConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Flip, then brightness/contrast, then noise, drawing from ``rng`` in that order."""
    flip = rng.random() < config.flip_probability
    lim = config.brightness_contrast_limit
    b, c = rng.uniform(-lim, lim, size=2) if lim else (0.0, 0.0)
    if flip:
        composite, mask = hflip(composite, mask)
    if lim:
        composite = adjust_brightness_contrast(composite, b, c)
    if config.noise_std:
        composite = add_gaussian_noise(composite, config.noise_std, rng)
    return composite, mask


def augment_arrays(
    x: np.ndarray,
    masks: np.ndarray,
    keys: Sequence[tuple[int, int]],
    config: AugmentConfig,
    epoch: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Augment a stacked batch; ``keys`` holds each tile's (row, col)."""
    config.validate()
    if not config.active:
        return x, masks
    xs, ms = [], []
    for xi, mi, (row, col) in zip(x, masks, keys):
        a, b = augment_pair(xi, mi, config, stream(config.seed, epoch, row, col))
        xs.append(a)
        ms.append(b)
    return np.stack(xs).astype(x.dtype), np.stack(ms)


def augment_batch(tiles: Sequence[Tile], config: AugmentConfig, epoch: int) -> list[Tile]:
    config.validate()
    out = []
    for t in tiles:
        comp, mask = augment_pair(t.composite.data, t.mask.layers, config, stream(config.seed, epoch, t.row, t.col))
        out.append(replace(t, composite=replace(t.composite, data=comp.astype(np.float32)), mask=ClassMask(mask)))
    return out
