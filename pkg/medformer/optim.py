"""AdamW with decoupled weight decay, exponential learning-rate decay and norm clipping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .const import DEFAULT_ADAM_EPS, DEFAULT_BETAS, DEFAULT_LR, DEFAULT_WEIGHT_DECAY
from .errors import NonFiniteGradientError

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .nn import Parameter

_LOGGER = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First and second moments per parameter plus the step counter."""

    step: int = 0
    m: list[np.ndarray | None] = field(default_factory=list)
    v: list[np.ndarray | None] = field(default_factory=list)


def adamw_step(  # noqa: PLR0913
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float = DEFAULT_LR,
    betas: tuple[float, float] = DEFAULT_BETAS,
    eps: float = DEFAULT_ADAM_EPS,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    names: Sequence[str] | None = None,
) -> AdamState:
    """
    Update ``params`` in place with one AdamW step and return the state.

    Decay is applied to the weights directly (``w ← w − lr·λ·w``), the Adam
    update uses bias-corrected moments. Parameters without a gradient, or
    with an all-zero gradient while ``weight_decay`` is 0, are left untouched.
    """
    names = names or [f"param{i}" for i in range(len(params))]
    for name, grad in zip(names, grads, strict=True):
        if grad is not None and not np.all(np.isfinite(grad)):
            _LOGGER.error("Gradient of '%s' is not finite", name)
            raise NonFiniteGradientError(name)
    if not state.m:
        state.m = [None] * len(params)
        state.v = [None] * len(params)
    state.step += 1
    beta1, beta2 = betas
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for i, (param, grad) in enumerate(zip(params, grads, strict=True)):
        if grad is None or (weight_decay == 0 and not np.any(grad)):
            continue
        if state.m[i] is None:
            state.m[i] = np.zeros_like(param)
            state.v[i] = np.zeros_like(param)
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        if weight_decay:
            param -= lr * weight_decay * param
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


def lr_schedule(lr0: float, gamma: float, epoch: int) -> float:
    """Exponentially decayed rate ``lr0 · gamma^epoch``."""
    return lr0 * gamma**epoch


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; return the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Stateful AdamW over named parameters."""

    def __init__(  # noqa: PLR0913
        self,
        named_params: Sequence[tuple[str, Parameter]],
        lr: float = DEFAULT_LR,
        betas: tuple[float, float] = DEFAULT_BETAS,
        eps: float = DEFAULT_ADAM_EPS,
        weight_decay: float = DEFAULT_WEIGHT_DECAY,
    ) -> None:
        """Track ``named_params`` with fresh moments."""
        self.names = [name for name, _ in named_params]
        self.params = [param for _, param in named_params]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self) -> None:
        """Apply one update from the current gradients."""
        adamw_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            lr=self.lr,
            betas=self.betas,
            eps=self.eps,
            weight_decay=self.weight_decay,
            names=self.names,
        )

    def zero_grad(self) -> None:
        """Forget every gradient."""
        for param in self.params:
            param.grad = None
