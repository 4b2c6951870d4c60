"""Global fusion of the semantic maps of every encoder scale."""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING

import numpy as np

from . import ops
from .attention import MultiHeadSelfAttention
from .const import DEFAULT_FUSION_BLOCKS, DEFAULT_FUSION_HEADS
from .errors import ShapeError
from .nn import Conv2d, LayerNorm, Module, ModuleList, PositionwiseFFN

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .data import SemanticMap
    from .tensor import Tensor

_LOGGER = logging.getLogger(__name__)


class TransformerBlock(Module):
    """Canonical pre-norm Transformer block on a ``N×d×L×1`` token sequence."""

    def __init__(self, d: int, n_heads: int, *, rng: np.random.Generator) -> None:
        """Create norms, attention and the position-wise FFN."""
        super().__init__()
        self.norm_attn = LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, n_heads, rng=rng)
        self.norm_ffn = LayerNorm(d)
        self.ffn = PositionwiseFFN(d, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        """Refine the sequence."""
        x = x + self.attn(self.norm_attn(x))
        return x + self.ffn.branch(self.norm_ffn(x))


class SemanticFusion(Module):
    """
    Concatenate the semantic tokens of all scales and run Transformer blocks.

    Each scale is projected to the common fusion width, the tokens are
    concatenated into one sequence, refined, split back in order and
    projected to their own width again. The result is added to the incoming
    map, so zero output projections give the identity.
    """

    def __init__(
        self,
        widths: Sequence[int],
        d_fuse: int,
        *,
        rng: np.random.Generator,
        n_blocks: int = DEFAULT_FUSION_BLOCKS,
        n_heads: int = DEFAULT_FUSION_HEADS,
    ) -> None:
        """Create the per-scale projections and the shared blocks."""
        super().__init__()
        self.widths = tuple(widths)
        self.proj_in = ModuleList(Conv2d(w, d_fuse, 1, rng=rng) for w in self.widths)
        self.blocks = ModuleList(
            TransformerBlock(d_fuse, n_heads, rng=rng) for _ in range(n_blocks)
        )
        self.proj_out = ModuleList(Conv2d(d_fuse, w, 1, rng=rng) for w in self.widths)
        _LOGGER.debug(
            "Fusing %d scales (widths %s) at width %d with %d blocks",
            len(self.widths),
            self.widths,
            d_fuse,
            n_blocks,
        )

    def forward(self, maps: Sequence[SemanticMap]) -> list[SemanticMap]:
        """Return the fused maps, one per input scale, with unchanged shapes."""
        if not maps:
            msg = "fusion needs at least one semantic map"
            raise ShapeError(msg)
        if len(maps) != len(self.widths):
            msg = f"fusion built for {len(self.widths)} scales, got {len(maps)}"
            raise ShapeError(msg)
        for scale, (m, width) in enumerate(zip(maps, self.widths, strict=True)):
            if m.shape[1] != width:
                msg = f"semantic map of scale {scale} has {m.shape[1]} channels, expected {width}"
                raise ShapeError(msg)

        sequences, lengths = [], []
        for m, proj in zip(maps, self.proj_in, strict=True):
            n, _, h, w = m.shape
            projected = proj(m)
            sequences.append(ops.reshape(projected, (n, projected.shape[1], h * w, 1)))
            lengths.append(h * w)
        tokens = ops.concat(sequences, axis=2)
        for block in self.blocks:
            tokens = block(tokens)

        fused = []
        for m, part, proj in zip(
            maps, ops.split(tokens, lengths, axis=2), self.proj_out, strict=True
        ):
            n, _, h, w = m.shape
            fused.append(m + proj(ops.reshape(part, (n, part.shape[1], h, w))))
        return fused


def fuse_semantic_maps(
    maps: Sequence[SemanticMap], fusion: SemanticFusion
) -> list[SemanticMap]:
    """Fuse semantic maps of every scale into globally informed maps."""
    return fusion(maps)
