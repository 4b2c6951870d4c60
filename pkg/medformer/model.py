"""
The MedFormer network.

A convolutional stem brings the image to 4× downsampled tokens, a three-level
encoder of bidirectional attention blocks (with patch merging between
levels) builds token maps and semantic maps at 4×, 8× and 16×, the final
semantic maps are fused across scales, and a decoder of bidirectional
blocks conditioned on the fused maps climbs back to 4× before a
convolutional decoder restores full resolution. An auxiliary 1×1 head on the
last attention-decoder output provides deep supervision.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING

import numpy as np

from . import ops
from .attention import AttnConfig, BMHABlock, EfficientBlock
from .const import MIN_INPUT_DIVISOR, STEM_BLOCKS
from .data import ForwardOutput, SemanticMap, TokenMap
from .errors import ShapeError
from .fusion import SemanticFusion
from .nn import Conv2d, GroupNorm, Module, ModuleList, PatchMerging, ResBlock, Upsample
from .semantic_map import SemanticMapInit
from .tensor import Tensor, as_tensor, no_grad

if TYPE_CHECKING:
    from pathlib import Path

    from .config import ModelConfig

_LOGGER = logging.getLogger(__name__)


def _res_stack(width: int, rng: np.random.Generator, padding_mode: str) -> ModuleList:
    return ModuleList(
        ResBlock(width, width, rng=rng, padding_mode=padding_mode) for _ in range(STEM_BLOCKS)
    )


class MedFormer(Module):
    """Hybrid convolution / bidirectional-attention segmentation network."""

    def __init__(self, cfg: ModelConfig, *, rng: np.random.Generator) -> None:
        """Create every layer from ``cfg``, drawing weights from ``rng``."""
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d0 = cfg.base_width
        d1, d2, d3 = cfg.widths
        pad = cfg.padding_mode

        # stem: full → 2× → 4×
        self.stem_in = Conv2d(cfg.in_channels, d0, 3, rng=rng, padding_mode=pad)
        self.stem_full = _res_stack(d0, rng, pad)
        self.stem_down1 = Conv2d(d0, 2 * d0, 2, rng=rng, stride=2, padding=0)
        self.stem_half = _res_stack(2 * d0, rng, pad)
        self.stem_down2 = Conv2d(2 * d0, d1, 2, rng=rng, stride=2, padding=0)

        self.merges = ModuleList(
            PatchMerging(cfg.widths[i - 1], cfg.widths[i], rng=rng) for i in (1, 2)
        )
        linear = cfg.attention == "linear"
        if not linear:
            self.semantic_inits = ModuleList(
                SemanticMapInit(width, cfg.semantic_hw, rng=rng, padding_mode=pad)
                for width in cfg.widths
            )
        self.encoder = ModuleList(
            self._level(level, cfg.blocks[level], rng, decoder=False) for level in range(3)
        )
        if not linear:
            self.fusion = SemanticFusion(
                cfg.widths,
                cfg.fusion_width,
                rng=rng,
                n_blocks=cfg.fusion_blocks,
                n_heads=cfg.fusion_heads,
            )

        # attention decoder: 16× → 8× → 4×
        self.decoder = ModuleList(
            self._level(level, cfg.decoder_blocks[level], rng, decoder=True)
            for level in range(3)
        )
        self.up_8 = Upsample(d3, d2, rng=rng, padding_mode=pad)
        self.reduce_8 = Conv2d(2 * d2, d2, 1, rng=rng)
        self.up_4 = Upsample(d2, d1, rng=rng, padding_mode=pad)
        self.reduce_4 = Conv2d(2 * d1, d1, 1, rng=rng)
        self.aux_head = Conv2d(d1, cfg.num_classes, 1, rng=rng)

        # convolutional decoder: 4× → 2× → full
        self.up_2 = Upsample(d1, 2 * d0, rng=rng, padding_mode=pad)
        self.reduce_2 = Conv2d(4 * d0, 2 * d0, 1, rng=rng)
        self.dec_half = _res_stack(2 * d0, rng, pad)
        self.up_1 = Upsample(2 * d0, d0, rng=rng, padding_mode=pad)
        self.reduce_1 = Conv2d(2 * d0, d0, 1, rng=rng)
        self.dec_full = _res_stack(d0, rng, pad)
        self.head_norm = GroupNorm(d0)
        self.head = Conv2d(d0, cfg.num_classes, 1, rng=rng)

    def _level(
        self, level: int, count: int, rng: np.random.Generator, *, decoder: bool
    ) -> ModuleList:
        cfg = self.cfg
        attn_cfg = AttnConfig(
            d=cfg.widths[level],
            n_heads=cfg.heads[level],
            kernel_size=cfg.kernel_size,
            semantic_hw=cfg.semantic_hw,
            share_qk=cfg.share_qk,
        )
        if cfg.attention == "linear":
            input_hw = None
            if cfg.input_hw is not None:
                stride = 4 * 2**level
                input_hw = (cfg.input_hw[0] // stride, cfg.input_hw[1] // stride)
            return ModuleList(
                EfficientBlock(
                    attn_cfg,
                    rng=rng,
                    reduction=cfg.reduction,
                    input_hw=input_hw,
                    padding_mode=cfg.padding_mode,
                )
                for _ in range(count)
            )
        # the last decoder block's semantic output would never be read
        return ModuleList(
            BMHABlock(
                attn_cfg,
                rng=rng,
                update_semantic=not (decoder and index == count - 1),
                padding_mode=cfg.padding_mode,
            )
            for index in range(count)
        )

    def _run_level(
        self, blocks: ModuleList, x: TokenMap, m: SemanticMap | None
    ) -> tuple[TokenMap, SemanticMap | None]:
        for block in blocks:
            if m is None:
                x = block(x)
            else:
                x, m = block(x, m)
        return x, m

    def capture_attention(self, enabled: bool = True) -> None:  # noqa: FBT001, FBT002
        """Keep the semantic-token attention of each encoder level's last block."""
        if self.cfg.attention == "linear":
            return
        for blocks in self.encoder:
            attn = blocks[len(blocks) - 1].attn
            attn.capture = enabled
            attn.last_semantic_attention = None

    def semantic_attention(self) -> list[np.ndarray | None]:
        """Return the captured attention per encoder level (``N×(h·w)×(H·W)``)."""
        if self.cfg.attention == "linear":
            return [None, None, None]
        return [blocks[len(blocks) - 1].attn.last_semantic_attention for blocks in self.encoder]

    def forward(self, image: Tensor | np.ndarray) -> ForwardOutput:
        """Segment ``image: N×C_in×H×W`` with H and W divisible by 16."""
        image = as_tensor(image)
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            msg = f"expected N×{self.cfg.in_channels}×H×W input, got {image.shape}"
            raise ShapeError(msg)
        h, w = image.shape[2:]
        if h % MIN_INPUT_DIVISOR or w % MIN_INPUT_DIVISOR:
            msg = f"input extent {(h, w)} is not divisible by {MIN_INPUT_DIVISOR}"
            raise ShapeError(msg)
        linear = self.cfg.attention == "linear"

        skip_full = self._run_stack(self.stem_full, self.stem_in(image))
        skip_half = self._run_stack(self.stem_half, self.stem_down1(skip_full))
        x = self.stem_down2(skip_half)

        encoder_maps: list[TokenMap] = []
        semantic_maps: list[SemanticMap] = []
        for level in range(3):
            if level:
                x = self.merges[level - 1](x)
            m = None if linear else self.semantic_inits[level](x)
            x, m = self._run_level(self.encoder[level], x, m)
            encoder_maps.append(x)
            if m is not None:
                semantic_maps.append(m)

        fused = [] if linear else self.fusion(semantic_maps)
        decoder_maps: list[SemanticMap] = []

        def sem(level: int) -> SemanticMap | None:
            return None if linear else fused[level]

        x, m = self._run_level(self.decoder[2], encoder_maps[2], sem(2))
        decoder_maps.extend([m] if m is not None else [])
        x = self.reduce_8(ops.concat([self.up_8(x), encoder_maps[1]], axis=1))
        x, m = self._run_level(self.decoder[1], x, sem(1))
        decoder_maps.extend([m] if m is not None else [])
        x = self.reduce_4(ops.concat([self.up_4(x), encoder_maps[0]], axis=1))
        x, m = self._run_level(self.decoder[0], x, sem(0))
        decoder_maps.extend([m] if m is not None else [])
        aux_logits = self.aux_head(x)

        x = self.reduce_2(ops.concat([self.up_2(x), skip_half], axis=1))
        x = self._run_stack(self.dec_half, x)
        x = self.reduce_1(ops.concat([self.up_1(x), skip_full], axis=1))
        x = self._run_stack(self.dec_full, x)
        logits = self.head(ops.gelu(self.head_norm(x)))

        return ForwardOutput(
            logits=logits,
            aux_logits=aux_logits,
            encoder_maps=encoder_maps,
            semantic_maps=semantic_maps,
            fused_maps=fused,
            decoder_semantic_maps=decoder_maps,
        )

    @staticmethod
    def _run_stack(blocks: ModuleList, x: Tensor) -> Tensor:
        for block in blocks:
            x = block(x)
        return x

    def predict_logits(self, image: np.ndarray) -> np.ndarray:
        """Return full-resolution logits for ``C×H×W`` or ``N×C×H×W`` input, without a tape."""
        batched = image.ndim == 4  # noqa: PLR2004
        data = image if batched else image[None]
        with no_grad():
            logits = self.forward(Tensor(data, dtype=self.stem_in.weight.dtype)).logits.data
        return logits if batched else logits[0]

    def save_checkpoint(self, path: str | Path) -> None:
        """Write the config and every parameter to ``path``."""
        from .checkpoint import save_checkpoint

        save_checkpoint(path, self)

    def load_checkpoint(self, path: str | Path) -> None:
        """Overwrite every parameter with the values stored at ``path``."""
        from .checkpoint import load_parameters

        load_parameters(path, self)


def build(cfg: ModelConfig, seed: int = 0) -> MedFormer:
    """Build a MedFormer whose initial weights depend only on ``cfg`` and ``seed``."""
    model = MedFormer(cfg, rng=np.random.default_rng(seed))
    _LOGGER.debug(
        "Built %s MedFormer with %d parameters (seed %d)",
        cfg.attention,
        model.parameter_count(),
        seed,
    )
    return model


def parameter_count(model: Module) -> int:
    """Number of trainable scalars of ``model``."""
    return model.parameter_count()


def named_parameters(model: Module) -> dict[str, Tensor]:
    """Map every dotted parameter name to its tensor."""
    return dict(model.named_parameters())
