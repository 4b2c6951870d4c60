"""Tests for multi-scale semantic fusion."""

from __future__ import annotations

import logging

import numpy as np
import pytest

from medformer.errors import ShapeError
from medformer.fusion import SemanticFusion, TransformerBlock, fuse_semantic_maps
from medformer.gradcheck import grad_check
from medformer.tensor import Tensor, using_dtype

from .conftest import GRAD_SEEDS, GRAD_TOL, leaf, weighted_sum

WIDTHS = (8, 16)


def _maps(rng: np.random.Generator, batch: int = 2) -> list[Tensor]:
    return [
        Tensor(rng.standard_normal((batch, 8, 2, 2))),
        Tensor(rng.standard_normal((batch, 16, 2, 2))),
    ]


def test_shapes_are_preserved(rng: np.random.Generator) -> None:
    """Each scale comes back with its own width and extent."""
    fusion = SemanticFusion(WIDTHS, 8, rng=rng, n_blocks=2, n_heads=2)
    maps = _maps(rng)
    fused = fuse_semantic_maps(maps, fusion)
    assert [m.shape for m in fused] == [m.shape for m in maps]


def test_zero_output_projection_is_identity(rng: np.random.Generator) -> None:
    """With zeroed output projections the maps pass through unchanged."""
    fusion = SemanticFusion(WIDTHS, 8, rng=rng)
    for proj in fusion.proj_out:
        proj.weight.data[:] = 0.0
        proj.bias.data[:] = 0.0
    maps = _maps(rng)
    for before, after in zip(maps, fusion(maps), strict=True):
        np.testing.assert_array_equal(after.data, before.data)


def test_fusion_mixes_scales(rng: np.random.Generator) -> None:
    """Changing the coarse map changes the fused fine map."""
    with using_dtype(np.float64):
        fusion = SemanticFusion(WIDTHS, 8, rng=rng)
    maps = _maps(rng, batch=1)
    baseline = fusion(maps)[0].data
    maps[1] = Tensor(maps[1].data + 1.0)
    assert not np.allclose(fusion(maps)[0].data, baseline)


def test_fusion_validates_inputs(rng: np.random.Generator) -> None:
    """Scale count and widths must match construction."""
    fusion = SemanticFusion(WIDTHS, 8, rng=rng)
    maps = _maps(rng)
    with pytest.raises(ShapeError):
        fusion([])
    with pytest.raises(ShapeError):
        fusion(maps[:1])
    with pytest.raises(ShapeError):
        fusion([maps[1], maps[0]])


def test_transformer_block_keeps_sequence_shape(rng: np.random.Generator) -> None:
    """Blocks operate on N×d×L×1 sequences."""
    block = TransformerBlock(8, 2, rng=rng)
    assert block(Tensor(rng.standard_normal((3, 8, 7, 1)))).shape == (3, 8, 7, 1)


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_fusion_gradient(seed: int) -> None:
    """Fusion passes the finite-difference check for maps and weights."""
    rng = np.random.default_rng(seed)
    with using_dtype(np.float64):
        fusion = SemanticFusion((8, 8), 8, rng=rng, n_blocks=1, n_heads=2)
    maps = [leaf(rng, 1, 8, 2, 2), leaf(rng, 1, 8, 1, 2)]

    def loss() -> Tensor:
        fused = fusion(maps)
        coeffs = np.random.default_rng(seed + 100)
        return weighted_sum(fused[0], coeffs) + weighted_sum(fused[1], coeffs)

    err = grad_check(
        loss, [*maps, *fusion.parameters()], samples=6, rng=np.random.default_rng(seed)
    )
    assert err < GRAD_TOL


def test_transformer_block_is_permutation_equivariant(rng: np.random.Generator) -> None:
    """Without positional encoding, permuting tokens permutes the output."""
    with using_dtype(np.float64):
        block = TransformerBlock(8, 2, rng=rng)
    tokens = rng.standard_normal((1, 8, 12, 1))
    order = rng.permutation(12)
    plain = block(Tensor(tokens)).data
    permuted = block(Tensor(tokens[:, :, order])).data
    np.testing.assert_allclose(permuted, plain[:, :, order], atol=1e-6)


def test_fusion_is_equivariant_to_token_order(rng: np.random.Generator) -> None:
    """Reordering one scale's tokens reorders its fused tokens and leaves the others."""
    with using_dtype(np.float64):
        fusion = SemanticFusion(WIDTHS, 8, rng=rng, n_blocks=2, n_heads=2)
    maps = _maps(rng, batch=1)
    order = np.array([3, 0, 2, 1])
    fine = maps[0].data.reshape(1, 8, 4)[:, :, order].reshape(1, 8, 2, 2)
    plain = fuse_semantic_maps(maps, fusion)
    moved = fuse_semantic_maps([Tensor(fine), maps[1]], fusion)
    np.testing.assert_allclose(
        moved[0].data.reshape(1, 8, 4), plain[0].data.reshape(1, 8, 4)[:, :, order], atol=1e-6
    )
    np.testing.assert_allclose(moved[1].data, plain[1].data, atol=1e-6)


def test_fusion_logs_its_layout(
    rng: np.random.Generator, caplog: pytest.LogCaptureFixture
) -> None:
    """Construction reports the scales and width at debug level."""
    with caplog.at_level(logging.DEBUG, logger="medformer.fusion"):
        SemanticFusion(WIDTHS, 8, rng=rng)
    assert "Fusing 2 scales" in caplog.text
