"""Initial semantic maps and token-compression diagnostics."""

from __future__ import annotations

import logging

import numpy as np

from . import ops
from .const import DEFAULT_SEMANTIC_HW
from .data import SemanticMap, TokenMap
from .errors import DegenerateTokenError, ShapeError
from .nn import Conv2d, Module
from .tensor import Tensor

_LOGGER = logging.getLogger(__name__)


class SemanticMapInit(Module):
    """
    Aggregate a token map into ``h·w`` semantic tokens.

    ``weight_conv`` predicts one spatial weight map per semantic token; the
    maps are softmaxed over all ``H·W`` positions and used to average the
    tokens of ``base_conv``. Every semantic token is therefore a convex
    combination of base tokens, whatever the input extent.
    """

    def __init__(
        self,
        d: int,
        semantic_hw: tuple[int, int] = DEFAULT_SEMANTIC_HW,
        *,
        rng: np.random.Generator,
        padding_mode: str = "zeros",
    ) -> None:
        """Create the weight and base convolutions."""
        super().__init__()
        self.semantic_hw = tuple(semantic_hw)
        tokens = self.semantic_hw[0] * self.semantic_hw[1]
        # no bias: a per-token constant cancels in the softmax
        self.weight_conv = Conv2d(d, tokens, 3, rng=rng, bias=False, padding_mode=padding_mode)
        self.base_conv = Conv2d(d, d, 3, rng=rng, padding_mode=padding_mode)
        _LOGGER.debug("Semantic map of %d tokens at width %d", tokens, d)

    def aggregation_weights(self, x: TokenMap) -> Tensor:
        """Return the row-stochastic weights ``N×(h·w)×(H·W)``."""
        return ops.softmax(ops.flatten(self.weight_conv(x), 2), axis=-1)

    def forward(self, x: TokenMap) -> SemanticMap:
        """Return the semantic map ``N×d×h×w``."""
        n, d = x.shape[:2]
        weights = self.aggregation_weights(x)
        base = ops.swap_last(ops.flatten(self.base_conv(x), 2))
        tokens = ops.matmul(weights, base)
        return ops.reshape(ops.swap_last(tokens), (n, d, *self.semantic_hw))


def init_semantic_map(x: TokenMap, init: SemanticMapInit) -> SemanticMap:
    """Generate the initial semantic map of ``x``."""
    return init(x)


def token_cosine_similarity(m: SemanticMap | np.ndarray) -> np.ndarray:
    """
    Return the absolute cosine similarity between every pair of semantic tokens.

    ``m`` is ``d×h×w`` or a single-sample batch ``1×d×h×w``. The result is a
    symmetric ``(h·w)×(h·w)`` matrix with a unit diagonal.
    """
    data = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    if data.ndim == 4:
        if data.shape[0] != 1:
            msg = f"expected a single semantic map, got a batch of {data.shape[0]}"
            raise ShapeError(msg)
        data = data[0]
    if data.ndim != 3:
        msg = f"expected a d×h×w semantic map, got shape {data.shape}"
        raise ShapeError(msg)
    tokens = data.reshape(data.shape[0], -1).T
    norms = np.linalg.norm(tokens, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        index = int(zero[0])
        msg = f"semantic token {index} has zero norm"
        raise DegenerateTokenError(msg, index)
    unit = tokens / norms[:, None]
    similarity = np.abs(unit @ unit.T)
    np.fill_diagonal(similarity, 1.0)
    return similarity
