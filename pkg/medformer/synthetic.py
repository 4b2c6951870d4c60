"""Seeded synthetic segmentation tasks."""

from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage

from .data import SegSample
from .errors import DataError

_LOGGER = logging.getLogger(__name__)

TEXTURE_SIGMA = 2.0
TEXTURE_AMPLITUDE = 0.3
EDGE_BLUR_SIGMA = 0.7
NOISE_SIGMA = 0.05


def _ellipse(rng: np.random.Generator, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = rows.shape
    cy, cx = rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w)
    ry, rx = rng.uniform(0.08 * h, 0.22 * h), rng.uniform(0.08 * w, 0.22 * w)
    return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0


def _rectangle(rng: np.random.Generator, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = rows.shape
    top, left = rng.integers(0, int(0.7 * h)), rng.integers(0, int(0.7 * w))
    height = rng.integers(max(2, h // 8), max(3, h // 3))
    width = rng.integers(max(2, w // 8), max(3, w // 3))
    return (rows >= top) & (rows < top + height) & (cols >= left) & (cols < left + width)


def synth_sample(
    rng: np.random.Generator, height: int, width: int, num_classes: int, case_id: str = ""
) -> SegSample:
    """Draw one image of blurred class shapes over a textured background."""
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    label = np.zeros((height, width), dtype=np.uint8)
    for cls in range(1, num_classes):
        draw = _ellipse if rng.random() < 0.5 else _rectangle  # noqa: PLR2004
        label[draw(rng, rows, cols)] = cls
    texture = ndimage.gaussian_filter(rng.normal(size=(height, width)), TEXTURE_SIGMA)
    texture *= TEXTURE_AMPLITUDE / max(float(np.abs(texture).max()), 1e-12)
    intensities = np.linspace(0.0, 1.0, num_classes)
    image = ndimage.gaussian_filter(intensities[label], EDGE_BLUR_SIGMA) + texture
    image += rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    return SegSample(
        image=image[None].astype(np.float32), label=label, spacing=(1.0, 1.0), case_id=case_id
    )


def synth_task(
    rng: np.random.Generator, n: int, height: int, width: int, num_classes: int
) -> list[SegSample]:
    """Draw ``n`` samples; the same generator state always yields the same data."""
    if n < 1 or height < 8 or width < 8 or num_classes < 2:  # noqa: PLR2004
        msg = f"cannot synthesise {n} samples of {height}×{width} with {num_classes} classes"
        raise DataError(msg)
    samples = [
        synth_sample(rng, height, width, num_classes, case_id=f"case_{index:04d}")
        for index in range(n)
    ]
    _LOGGER.debug("Synthesised %d samples of %dx%d, %d classes", n, height, width, num_classes)
    return samples
