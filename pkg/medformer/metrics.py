"""Evaluation metrics: Dice similarity coefficient and 95th-percentile Hausdorff distance."""

from __future__ import annotations

import logging
import math
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd
from scipy import ndimage

from .const import HD_PERCENTILE, METRIC_COLUMNS
from .errors import DataError, ShapeError

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

_LOGGER = logging.getLogger(__name__)


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        msg = f"prediction {pred.shape} and ground truth {gt.shape} differ in shape"
        raise ShapeError(msg)


def dsc(pred: np.ndarray, gt: np.ndarray, cls: int | None = None) -> float:
    """
    Dice similarity ``2|P∩G| / (|P| + |G|)``.

    With ``cls`` the label maps are compared for that class, otherwise both
    arguments are taken as masks. Two empty masks score 1.0, one empty mask
    scores 0.0.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_shapes(pred, gt)
    p = pred == cls if cls is not None else pred.astype(bool)
    g = gt == cls if cls is not None else gt.astype(bool)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with at least one 4-connected neighbour outside it."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def surface_distances(
    pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float] = (1.0, 1.0)
) -> np.ndarray:
    """Pooled directed boundary distances, prediction→truth then truth→prediction."""
    border_pred, border_gt = boundary(pred), boundary(gt)
    to_gt = ndimage.distance_transform_edt(~border_gt, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~border_pred, sampling=spacing)
    return np.concatenate([to_gt[border_pred], to_pred[border_gt]])


def hd95(
    pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float] = (1.0, 1.0)
) -> float:
    """
    95th percentile of the pooled symmetric boundary distances, in physical units.

    Returns ``inf`` when either mask is empty.
    """
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    _check_shapes(pred, gt)
    if any(s <= 0 for s in spacing):
        msg = f"spacing {tuple(spacing)} must be positive"
        raise DataError(msg)
    if not pred.any() or not gt.any():
        return math.inf
    return float(np.percentile(surface_distances(pred, gt, spacing), HD_PERCENTILE))


def evaluate_case(
    case_id: str,
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    spacing: Sequence[float] = (1.0, 1.0),
) -> list[dict]:
    """Return one metric record per foreground class."""
    _check_shapes(np.asarray(pred), np.asarray(gt))
    return [
        {
            "case_id": case_id,
            "class": cls,
            "dsc": dsc(pred, gt, cls),
            "hd95": hd95(pred == cls, gt == cls, spacing),
        }
        for cls in range(1, num_classes)
    ]


def evaluate_cases(
    cases: Iterable[tuple[str, np.ndarray, np.ndarray, Sequence[float]]],
    num_classes: int,
) -> pd.DataFrame:
    """Build the per-case, per-class report from ``(case_id, pred, gt, spacing)`` tuples."""
    records = [
        record
        for case_id, pred, gt, spacing in cases
        for record in evaluate_case(case_id, pred, gt, num_classes, spacing)
    ]
    if not records:
        msg = "nothing to evaluate"
        raise DataError(msg)
    return pd.DataFrame.from_records(records, columns=list(METRIC_COLUMNS))


def summarize(report: pd.DataFrame) -> pd.DataFrame:
    """
    Per-class means of a metric report.

    Infinite HD95 values (empty masks) are left out of the mean and counted
    in ``hd95_excluded``.
    """
    rows = []
    for cls, group in report.groupby("class", sort=True):
        finite = group["hd95"][np.isfinite(group["hd95"])]
        excluded = len(group) - len(finite)
        if excluded:
            _LOGGER.warning(
                "Class %s: %d of %d cases have an empty mask; HD95 mean excludes them",
                cls,
                excluded,
                len(group),
            )
        rows.append(
            {
                "class": cls,
                "dsc": float(group["dsc"].mean()),
                "hd95": float(finite.mean()) if len(finite) else math.inf,
                "hd95_excluded": excluded,
                "cases": len(group),
            }
        )
    return pd.DataFrame(rows)
