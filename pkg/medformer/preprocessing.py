"""Resampling, intensity normalization and on-the-fly augmentation."""

from __future__ import annotations

import logging
import math
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

from .config import AugmentConfig
from .const import STD_CLAMP
from .errors import DataError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .data import SegSample

_LOGGER = logging.getLogger(__name__)


def resample(sample: SegSample, target_spacing: Sequence[float]) -> SegSample:
    """
    Resample to ``target_spacing``: bilinear for the image, nearest for the label.

    New extents are ``round(old · spacing / target)``; grid corners stay aligned.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 2 or min(target) <= 0 or min(sample.spacing) <= 0:  # noqa: PLR2004
        msg = (
            f"Case '{sample.case_id}': spacings must be positive, "
            f"got {sample.spacing} -> {target}"
        )
        raise DataError(msg)
    if target == tuple(sample.spacing):
        return sample
    old = sample.shape
    new = tuple(
        max(1, round(extent * spacing / goal))
        for extent, spacing, goal in zip(old, sample.spacing, target, strict=True)
    )
    factors = tuple(n / o for n, o in zip(new, old, strict=True))
    image = np.stack(
        [ndimage.zoom(channel, factors, order=1, mode="nearest") for channel in sample.image]
    )
    label = ndimage.zoom(sample.label, factors, order=0, mode="nearest")
    _LOGGER.debug("Resampled case '%s' from %s to %s", sample.case_id, old, new)
    return sample.with_arrays(image, label, target)


def normalize_intensity(sample: SegSample) -> SegSample:
    """Standardize each channel with foreground statistics (whole image if no foreground)."""
    foreground = sample.label > 0
    if not foreground.any():
        _LOGGER.warning(
            "Case '%s' has no foreground; normalizing with whole-image statistics",
            sample.case_id,
        )
    image = sample.image.astype(np.float64)
    for channel in image:
        values = channel[foreground] if foreground.any() else channel.ravel()
        std = max(float(values.std()), STD_CLAMP)
        channel -= values.mean()
        channel /= std
    return sample.with_arrays(image, sample.label)


def _affine(shape: tuple[int, int], angle_deg: float, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Matrix and offset mapping output pixels to input pixels about the array centre."""
    theta = math.radians(angle_deg)
    # exact right angles keep grid points on grid points
    cos, sin = round(math.cos(theta), 12), round(math.sin(theta), 12)
    rotation = np.array([[cos, -sin], [sin, cos]])
    matrix = rotation / scale
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    return matrix, center - matrix @ center


def apply_geometric(sample: SegSample, angle_deg: float, scale: float = 1.0) -> SegSample:
    """
    Rotate clockwise by ``angle_deg`` and zoom by ``scale`` about the centre.

    A 90° rotation of a square sample equals ``np.rot90(k=-1)``.
    """
    matrix, offset = _affine(sample.shape, angle_deg, scale)
    image = np.stack(
        [
            ndimage.affine_transform(channel, matrix, offset, order=1, mode="nearest")
            for channel in sample.image
        ]
    )
    label = ndimage.affine_transform(
        sample.label, matrix, offset, order=0, mode="constant", cval=0
    )
    return sample.with_arrays(image, label)


def random_crop(
    sample: SegSample, size: Sequence[int] | None, rng: np.random.Generator
) -> SegSample:
    """Cut a ``size`` window at a random position (no-op for ``None``)."""
    if size is None:
        return sample
    (h, w), (ch, cw) = sample.shape, tuple(size)
    if ch > h or cw > w:
        msg = f"Case '{sample.case_id}': crop {(ch, cw)} is larger than the image {(h, w)}"
        raise DataError(msg)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return sample.with_arrays(
        sample.image[:, top : top + ch, left : left + cw],
        sample.label[top : top + ch, left : left + cw],
    )


def augment(
    sample: SegSample, rng: np.random.Generator, cfg: AugmentConfig | None = None
) -> SegSample:
    """
    Apply random augmentation.

    Rotation, scaling, brightness shift, contrast change and Gaussian noise
    each fire with ``cfg.probability``; the crop always runs. The label only
    follows the geometric transforms.
    """
    cfg = cfg or AugmentConfig()
    if cfg.enabled:
        p = cfg.probability
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) if rng.random() < p else 0.0
        scale = rng.uniform(*cfg.scale_range) if rng.random() < p else 1.0
        if angle or scale != 1.0:
            sample = apply_geometric(sample, angle, scale)

        image = sample.image.astype(np.float64)
        if rng.random() < p:
            image = image + rng.uniform(-cfg.brightness, cfg.brightness)
        if rng.random() < p:
            mean = image.mean()
            image = mean + (image - mean) * rng.uniform(*cfg.contrast_range)
        if rng.random() < p:
            sigma = rng.uniform(0.0, cfg.noise_sigma_max)
            image = image + rng.normal(0.0, sigma, size=image.shape)
        sample = sample.with_arrays(image, sample.label)
    return random_crop(sample, cfg.crop_size, rng)
