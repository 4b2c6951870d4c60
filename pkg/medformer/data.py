"""Shared data types for the medformer package."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TypeAlias

import numpy as np

from .errors import DataError
from .tensor import Tensor

TokenMap: TypeAlias = Tensor
"""Feature tensor ``N×d×H×W``; every spatial position is a token."""

SemanticMap: TypeAlias = Tensor
"""Compact token set ``N×d×h×w`` summarising a token map."""

LabelMap: TypeAlias = np.ndarray
"""Integer class map ``H×W`` (or ``N×H×W`` for a batch)."""


@dataclass(frozen=True)
class SegSample:
    """One segmentation case: image ``C×H×W``, label ``H×W``, pixel spacing."""

    image: np.ndarray
    label: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)
    case_id: str = ""

    def __post_init__(self) -> None:
        """Check the extents and dtypes agree."""
        if self.image.ndim != 3 or self.label.ndim != 2:
            msg = (
                f"Case '{self.case_id}': expected image C×H×W and label H×W, "
                f"got {self.image.shape} and {self.label.shape}"
            )
            raise DataError(msg)
        if self.image.shape[1:] != self.label.shape:
            msg = (
                f"Case '{self.case_id}': image extent {self.image.shape[1:]} "
                f"differs from label extent {self.label.shape}"
            )
            raise DataError(msg)
        if len(self.spacing) != 2:
            msg = f"Case '{self.case_id}': spacing {self.spacing} must have two entries"
            raise DataError(msg)

    @property
    def shape(self) -> tuple[int, int]:
        """Spatial extent ``(H, W)``."""
        return self.label.shape

    def with_arrays(
        self,
        image: np.ndarray,
        label: np.ndarray,
        spacing: tuple[float, float] | None = None,
    ) -> SegSample:
        """Return a copy holding new arrays."""
        return replace(
            self,
            image=image.astype(np.float32, copy=False),
            label=label.astype(np.uint8, copy=False),
            spacing=self.spacing if spacing is None else tuple(spacing),
        )


@dataclass
class ForwardOutput:
    """Everything a MedFormer forward pass produces."""

    logits: Tensor
    aux_logits: Tensor | None = None
    encoder_maps: list[TokenMap] = field(default_factory=list)
    semantic_maps: list[SemanticMap] = field(default_factory=list)
    fused_maps: list[SemanticMap] = field(default_factory=list)
    decoder_semantic_maps: list[SemanticMap] = field(default_factory=list)
