"""Training losses: pixel-averaged cross-entropy plus soft Dice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .const import CE_LOG_CLAMP, DICE_SMOOTH, PROB_SUM_TOLERANCE
from .errors import DataError, ShapeError
from .tensor import Tensor, as_tensor


def _batched(probs: Tensor, labels: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Bring ``C×H×W`` / ``H×W`` input to the batched form and check it."""
    probs = as_tensor(probs)
    labels = np.asarray(labels)
    if probs.ndim == 3:  # noqa: PLR2004
        probs = ops.reshape(probs, (1, *probs.shape))
        labels = labels[None]
    if probs.ndim != 4 or labels.shape != (probs.shape[0], *probs.shape[2:]):
        msg = f"probabilities {probs.shape} and labels {labels.shape} do not match"
        raise ShapeError(msg)
    classes = probs.shape[1]
    bad = np.argwhere((labels < 0) | (labels >= classes))
    if bad.size:
        index = tuple(int(i) for i in bad[0])
        msg = f"label {int(labels[index])} at pixel {index} is outside [0, {classes})"
        raise DataError(msg)
    drift = np.abs(probs.data.sum(axis=1) - 1.0)
    if drift.max() > PROB_SUM_TOLERANCE:
        index = tuple(int(i) for i in np.unravel_index(int(drift.argmax()), drift.shape))
        msg = f"class probabilities at pixel {index} sum to {1.0 + float(drift[index]):.6f}, not 1"
        raise DataError(msg)
    return probs, labels


def one_hot(labels: np.ndarray, classes: int, dtype: np.dtype) -> np.ndarray:
    """Return ``N×C×H×W`` indicators of ``labels: N×H×W``."""
    return (labels[:, None] == np.arange(classes)[None, :, None, None]).astype(dtype)


def ce_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over pixels of ``-log p`` at the true class, with ``p`` clamped at 1e-12."""
    probs, labels = _batched(probs, labels)
    target = Tensor(one_hot(labels, probs.shape[1], probs.dtype))
    p_true = ops.sum(probs * target, axis=1)
    return -ops.mean(ops.log(ops.clamp_min(p_true, CE_LOG_CLAMP)))


def dice_loss(probs: Tensor, labels: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """
    Soft Dice loss averaged over classes and samples.

    Per sample and class ``1 - (2·Σyp + ε)/(Σy + Σp + ε)``; a class absent
    from both prediction and label contributes zero.
    """
    probs, labels = _batched(probs, labels)
    target = one_hot(labels, probs.shape[1], probs.dtype)
    overlap = ops.sum(probs * Tensor(target), axis=(2, 3))
    predicted = ops.sum(probs, axis=(2, 3))
    denominator = predicted + Tensor(target.sum(axis=(2, 3)) + smooth)
    ratio = (overlap * 2.0 + smooth) / denominator
    return 1.0 - ops.mean(ratio)


@dataclass(frozen=True)
class LossTerms:
    """A combined loss and its two parts."""

    ce: Tensor
    dice: Tensor
    total: Tensor


def loss_terms(probs: Tensor, labels: np.ndarray) -> LossTerms:
    """Return cross-entropy, Dice and their sum."""
    ce = ce_loss(probs, labels)
    dice = dice_loss(probs, labels)
    return LossTerms(ce=ce, dice=dice, total=ce + dice)


def total_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy plus Dice loss."""
    return loss_terms(probs, labels).total


def softmax_probs(logits: Tensor) -> Tensor:
    """Class probabilities of ``N×C×H×W`` logits."""
    return ops.softmax(logits, axis=1)
