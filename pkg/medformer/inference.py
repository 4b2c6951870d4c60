"""Sliding-window inference with half-overlapping windows."""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING

import numpy as np

from .errors import DataError

if TYPE_CHECKING:
    from collections.abc import Callable

_LOGGER = logging.getLogger(__name__)


def softmax_np(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Numerically stable softmax of a plain array."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def window_starts(extent: int, window: int) -> list[int]:
    """Window offsets at stride ``window // 2``, the last one snapped to the edge."""
    if window > extent:
        msg = f"window {window} is larger than the image extent {extent}"
        raise DataError(msg)
    stride = max(1, window // 2)
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)
    return starts


def sliding_window_infer(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    image: np.ndarray,
    window: int | tuple[int, int],
    *,
    softmax: bool = True,
) -> np.ndarray:
    """
    Predict ``image: C_in×H×W`` window by window and average the overlaps.

    ``predict_fn`` maps a ``C_in×h×w`` patch to ``C×h×w`` logits. With
    ``softmax`` every window is turned into probabilities before being
    accumulated; the sum is divided by the per-pixel coverage count.
    """
    image = np.asarray(image)
    if image.ndim == 2:  # noqa: PLR2004
        image = image[None]
    wh, ww = (window, window) if isinstance(window, int) else window
    h, w = image.shape[1:]
    if wh > h or ww > w:
        msg = f"window {(wh, ww)} is larger than the image {(h, w)}"
        raise DataError(msg)
    rows, cols = window_starts(h, wh), window_starts(w, ww)

    total: np.ndarray | None = None
    coverage = np.zeros((h, w), dtype=np.float64)
    for top in rows:
        for left in cols:
            out = np.asarray(predict_fn(image[:, top : top + wh, left : left + ww]), dtype=np.float64)
            if softmax:
                out = softmax_np(out, axis=0)
            if total is None:
                total = np.zeros((out.shape[0], h, w), dtype=np.float64)
            total[:, top : top + wh, left : left + ww] += out
            coverage[top : top + wh, left : left + ww] += 1.0
    _LOGGER.debug("Sliding window %s over %s: %d placements", (wh, ww), (h, w), len(rows) * len(cols))
    return total / coverage
