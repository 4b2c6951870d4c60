"""Finite-difference verification of the gradient tape."""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING

import numpy as np

from .const import GRAD_CHECK_EPS, GRAD_CHECK_FLOOR
from .errors import ContractError

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from .tensor import Tensor

_LOGGER = logging.getLogger(__name__)


def relative_error(analytic: float, numeric: float, floor: float = GRAD_CHECK_FLOOR) -> float:
    """Return ``|a - n| / max(|a|, |n|, floor)``."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _evaluate(f: Callable[[], Tensor]) -> float:
    out = f()
    if out.size != 1:
        msg = f"grad_check needs a scalar-valued function, got shape {out.shape}"
        raise ContractError(msg)
    return float(out.data.reshape(-1)[0])


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = GRAD_CHECK_EPS,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """
    Compare the tape gradient of ``f`` against central differences.

    ``f`` takes no arguments and rebuilds its graph from ``inputs`` on every
    call; every input must be a float64 tensor with ``requires_grad``. With
    ``samples`` only that many randomly chosen entries per input are probed.
    Returns the worst relative error over every probed entry.
    """
    for index, tensor in enumerate(inputs):
        if tensor.dtype != np.float64:
            msg = f"grad_check input {index} is {tensor.dtype}, float64 required"
            raise ContractError(msg)
        if not tensor.requires_grad:
            msg = f"grad_check input {index} does not require grad"
            raise ContractError(msg)

    for tensor in inputs:
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.zero_grad()
    out = f()
    if out.size != 1:
        msg = f"grad_check needs a scalar-valued function, got shape {out.shape}"
        raise ContractError(msg)
    out.backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else np.array(t.grad, dtype=np.float64)
        for t in inputs
    ]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for tensor, grad in zip(inputs, analytic, strict=True):
        flat = tensor.data.reshape(-1)
        positions = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            positions = rng.choice(flat.size, size=samples, replace=False)
        for position in positions:
            original = flat[position]
            flat[position] = original + eps
            plus = _evaluate(f)
            flat[position] = original - eps
            minus = _evaluate(f)
            flat[position] = original
            numeric = (plus - minus) / (2.0 * eps)
            worst = max(worst, relative_error(float(grad.reshape(-1)[position]), numeric))

    _LOGGER.debug("grad_check over %d inputs: worst relative error %.3e", len(inputs), worst)
    return worst
