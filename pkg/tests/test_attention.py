"""Tests for the attention layers."""

from __future__ import annotations

import math

import numpy as np
import pytest

from medformer import ops
from medformer.attention import (
    AttnConfig,
    BidirectionalAttention,
    BMHABlock,
    EfficientAttention,
    EfficientBlock,
    MultiHeadSelfAttention,
    bidirectional_attention,
    bmha,
    conv_ffn,
    conv_project,
    dense_mhsa,
    efficient_attention,
    from_heads,
    swin_pair_forward,
    to_heads,
    window_mhsa_forward,
)
from medformer.errors import ConfigError, ShapeError
from medformer.gradcheck import grad_check
from medformer.nn import ConvFFN, ConvProjection
from medformer.profiling import count_macs
from medformer.tensor import Tensor, no_grad, using_dtype

from .conftest import GRAD_SEEDS, GRAD_TOL, leaf, weighted_sum


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _pointwise(conv) -> np.ndarray:
    return conv.weight.data[:, :, 0, 0]


def naive_bidirectional(attn: BidirectionalAttention, x: np.ndarray, m: np.ndarray):
    """Dense cross-attention in both directions, written head by head."""
    _, d, h, w = x.shape
    heads, dh = attn.cfg.n_heads, attn.cfg.head_dim
    xs, ms = x[0].reshape(d, -1).T, m[0].reshape(d, -1).T
    q = xs @ _pointwise(attn.proj_qk.pointwise).T
    v = xs @ _pointwise(attn.proj_v.pointwise).T
    q_sem = ms @ _pointwise(attn.proj_qk_sem.pointwise).T
    v_sem = ms @ _pointwise(attn.proj_v_sem.pointwise).T
    tokens, semantic = [], []
    for head in range(heads):
        cols = slice(head * dh, (head + 1) * dh)
        logits = q[:, cols] @ q_sem[:, cols].T / math.sqrt(dh)
        tokens.append(_softmax_rows(logits) @ v_sem[:, cols])
        semantic.append(_softmax_rows(logits.T) @ v[:, cols])
    tokens = np.concatenate(tokens, axis=1) @ _pointwise(attn.out).T + attn.out.bias.data
    semantic = np.concatenate(semantic, axis=1) @ _pointwise(attn.out_sem).T + attn.out_sem.bias.data
    return tokens.T.reshape(1, d, h, w), semantic.T.reshape(m.shape)


def test_attn_config_validation() -> None:
    """Bad layouts name the offending field."""
    with pytest.raises(ConfigError) as err:
        AttnConfig(d=10, n_heads=4)
    assert err.value.field == "n_heads"
    with pytest.raises(ConfigError) as err:
        AttnConfig(d=8, n_heads=2, kernel_size=2)
    assert err.value.field == "kernel_size"
    cfg = AttnConfig(d=8, n_heads=2, semantic_hw=(2, 3))
    assert cfg.head_dim == 4
    assert cfg.semantic_tokens == 6


def test_heads_round_trip(rng: np.random.Generator) -> None:
    """from_heads inverts to_heads; channels split contiguously."""
    x = Tensor(rng.standard_normal((2, 6, 3, 4)))
    seq = to_heads(x, 3)
    assert seq.shape == (2, 3, 12, 2)
    np.testing.assert_array_equal(seq.data[1, 2, :, 0], x.data[1, 4].reshape(-1))
    np.testing.assert_array_equal(from_heads(seq, (3, 4)).data, x.data)


@pytest.mark.parametrize("seed", range(50))
def test_transposed_logits_match_independent_path(seed: int) -> None:
    """With shared projections the semantic stream reuses the transposed logits exactly."""
    rng = np.random.default_rng(seed)
    heads = int(rng.integers(1, 4))
    dh = int(rng.integers(1, 5))
    n, l = int(rng.integers(2, 40)), int(rng.integers(1, 10))
    q, v = (Tensor(rng.standard_normal((2, heads, n, dh))) for _ in range(2))
    q_sem, v_sem = (Tensor(rng.standard_normal((2, heads, l, dh))) for _ in range(2))
    shared = bidirectional_attention(q, v, q_sem, v_sem)
    separate = bidirectional_attention(q, v, q_sem, v_sem, k=q, k_sem=q_sem)
    np.testing.assert_allclose(shared.semantic.data, separate.semantic.data, atol=1e-6)
    np.testing.assert_allclose(shared.tokens.data, separate.tokens.data, atol=1e-6)
    np.testing.assert_allclose(shared.semantic_logits.data, np.swapaxes(shared.logits.data, -1, -2))


def test_attention_weights_are_row_stochastic(rng: np.random.Generator) -> None:
    """Both weight matrices are convex combinations over their keys."""
    q, v = (Tensor(rng.standard_normal((1, 2, 30, 4)) * 3.0) for _ in range(2))
    q_sem, v_sem = (Tensor(rng.standard_normal((1, 2, 6, 4)) * 3.0) for _ in range(2))
    result = bidirectional_attention(q, v, q_sem, v_sem)
    np.testing.assert_allclose(result.token_weights.data.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(result.semantic_weights.data.sum(axis=-1), 1.0, atol=1e-6)
    assert result.token_weights.data.min() >= 0.0
    # outputs lie inside the hull of the value rows
    assert result.tokens.data.max() <= v_sem.data.max() + 1e-12
    assert result.semantic.data.min() >= v.data.min() - 1e-12


def test_bidirectional_matches_dense_oracle(rng: np.random.Generator) -> None:
    """Pointwise B-MHA equals explicit cross-attention in both directions."""
    with using_dtype(np.float64):
        attn = BidirectionalAttention(
            AttnConfig(d=8, n_heads=2, kernel_size=1, semantic_hw=(2, 3)), rng=rng
        )
        attn.out.bias.data = rng.standard_normal(8)
        attn.out_sem.bias.data = rng.standard_normal(8)
    x, m = rng.standard_normal((1, 8, 4, 5)), rng.standard_normal((1, 8, 2, 3))
    tokens, semantic = attn(Tensor(x), Tensor(m))
    expected_tokens, expected_semantic = naive_bidirectional(attn, x, m)
    np.testing.assert_allclose(tokens.data, expected_tokens, atol=1e-6)
    np.testing.assert_allclose(semantic.data, expected_semantic, atol=1e-6)


def test_efficient_attention_full_rank_equals_dense(rng: np.random.Generator) -> None:
    """With l = n and identity reduction low-rank attention is dense attention."""
    with using_dtype(np.float64):
        dense = MultiHeadSelfAttention(8, 2, rng=rng)
        low_rank = EfficientAttention(8, 2, (3, 4), rng=rng)
    for name in ("query", "key", "value", "out"):
        getattr(low_rank, name).weight.data = getattr(dense, name).weight.data.copy()
    low_rank.out.bias.data = rng.standard_normal(8)
    dense.out.bias.data = low_rank.out.bias.data.copy()
    x = Tensor(rng.standard_normal((2, 8, 3, 4)))
    np.testing.assert_allclose(
        efficient_attention(x, low_rank).data, dense_mhsa(x, dense).data, atol=1e-6
    )


def test_efficient_attention_reductions(rng: np.random.Generator) -> None:
    """Pool reduction accepts any divisible input, strided is fixed at construction."""
    pooled = EfficientAttention(8, 2, (2, 2), rng=rng)
    assert pooled(Tensor(rng.standard_normal((1, 8, 8, 4)))).shape == (1, 8, 8, 4)
    with pytest.raises(ConfigError) as err:
        EfficientAttention(8, 2, (2, 2), rng=rng, reduction="strided")
    assert err.value.field == "input_hw"
    strided = EfficientAttention(8, 2, (2, 2), rng=rng, reduction="strided", input_hw=(8, 8))
    assert strided.factor == 4
    assert strided(Tensor(rng.standard_normal((1, 8, 8, 8)))).shape == (1, 8, 8, 8)
    with pytest.raises(ShapeError):
        strided(Tensor(rng.standard_normal((1, 8, 4, 4))))
    with pytest.raises(ConfigError):
        EfficientAttention(8, 2, (2, 2), rng=rng, reduction="median")


def test_efficient_attention_macs_are_linear(rng: np.random.Generator) -> None:
    """Doubling the token count doubles the MACs of low-rank attention."""
    attn = EfficientAttention(8, 2, (2, 2), rng=rng)
    counts = []
    for hw in ((8, 8), (8, 16)):
        with no_grad(), count_macs() as counter:
            attn(Tensor(rng.standard_normal((1, 8, *hw))))
        counts.append(counter.total)
    assert counts[1] == 2 * counts[0]


def test_bidirectional_rejects_mismatched_maps(rng: np.random.Generator) -> None:
    """The semantic map must have the configured extent, batch and width."""
    attn = BidirectionalAttention(AttnConfig(d=8, n_heads=2, semantic_hw=(2, 2)), rng=rng)
    x = Tensor(rng.standard_normal((1, 8, 4, 4)))
    with pytest.raises(ShapeError):
        attn(x, Tensor(rng.standard_normal((1, 8, 3, 3))))
    with pytest.raises(ShapeError):
        attn(x, Tensor(rng.standard_normal((2, 8, 2, 2))))


def test_non_shared_projections(rng: np.random.Generator) -> None:
    """Separate keys add projections and still produce both streams."""
    shared_cfg = AttnConfig(d=8, n_heads=2, semantic_hw=(2, 2))
    separate_cfg = AttnConfig(d=8, n_heads=2, semantic_hw=(2, 2), share_qk=False)
    shared = BidirectionalAttention(shared_cfg, rng=rng)
    separate = BidirectionalAttention(separate_cfg, rng=rng)
    assert separate.parameter_count() == shared.parameter_count() + 8 * 9 + 64 + 64
    tokens, semantic = separate(
        Tensor(rng.standard_normal((1, 8, 4, 4))), Tensor(rng.standard_normal((1, 8, 2, 2)))
    )
    assert tokens.shape == (1, 8, 4, 4)
    assert semantic.shape == (1, 8, 2, 2)


def test_block_without_semantic_update(rng: np.random.Generator) -> None:
    """A final block passes the semantic map through and owns no semantic-stream weights."""
    cfg = AttnConfig(d=8, n_heads=2, semantic_hw=(2, 2))
    block = BMHABlock(cfg, rng=rng, update_semantic=False)
    names = {name for name, _ in block.named_parameters()}
    assert not any("ffn_m" in name or "out_sem" in name or "proj_v." in name for name in names)
    m = Tensor(rng.standard_normal((1, 8, 2, 2)))
    x, m_out = bmha(Tensor(rng.standard_normal((1, 8, 4, 4))), m, block)
    assert m_out is m
    assert x.shape == (1, 8, 4, 4)


def test_capture_semantic_attention(rng: np.random.Generator) -> None:
    """Captured semantic attention is head-averaged and row-stochastic."""
    block = BMHABlock(AttnConfig(d=8, n_heads=2, semantic_hw=(2, 2)), rng=rng)
    block.attn.capture = True
    bmha(Tensor(rng.standard_normal((1, 8, 4, 6))), Tensor(rng.standard_normal((1, 8, 2, 2))), block)
    weights = block.attn.last_semantic_attention
    assert weights.shape == (1, 4, 24)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-5)


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_bidirectional_core_gradient(seed: int) -> None:
    """The functional core passes the finite-difference check in both streams."""
    rng = np.random.default_rng(seed)
    q, v = leaf(rng, 1, 2, 6, 3), leaf(rng, 1, 2, 6, 3)
    q_sem, v_sem = leaf(rng, 1, 2, 4, 3), leaf(rng, 1, 2, 4, 3)

    def loss() -> Tensor:
        result = bidirectional_attention(q, v, q_sem, v_sem)
        coeffs = np.random.default_rng(seed + 100)
        return weighted_sum(result.tokens, coeffs) + weighted_sum(result.semantic, coeffs)

    assert grad_check(loss, [q, v, q_sem, v_sem]) < GRAD_TOL


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_bmha_block_gradient(seed: int) -> None:
    """A full B-MHA block passes the finite-difference check for inputs and weights."""
    rng = np.random.default_rng(seed)
    with using_dtype(np.float64):
        block = BMHABlock(AttnConfig(d=8, n_heads=2, semantic_hw=(2, 2)), rng=rng)
    x, m = leaf(rng, 1, 8, 4, 4), leaf(rng, 1, 8, 2, 2)

    def loss() -> Tensor:
        x_out, m_out = block(x, m)
        coeffs = np.random.default_rng(seed + 100)
        return weighted_sum(x_out, coeffs) + weighted_sum(m_out, coeffs)

    inputs = [x, m, *block.parameters()]
    assert grad_check(loss, inputs, samples=6, rng=np.random.default_rng(seed)) < GRAD_TOL


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_efficient_block_gradient(seed: int) -> None:
    """The low-rank block passes the finite-difference check."""
    rng = np.random.default_rng(seed)
    with using_dtype(np.float64):
        block = EfficientBlock(AttnConfig(d=8, n_heads=2, semantic_hw=(2, 2)), rng=rng)
    x = leaf(rng, 1, 8, 4, 4)
    err = grad_check(
        lambda: weighted_sum(block(x), np.random.default_rng(seed + 100)),
        [x, *block.parameters()],
        samples=6,
        rng=np.random.default_rng(seed),
    )
    assert err < GRAD_TOL


def test_window_attention_is_blockwise(rng: np.random.Generator) -> None:
    """Unshifted window attention runs dense attention inside each window."""
    attn = MultiHeadSelfAttention(4, 2, rng=rng)
    x = Tensor(rng.standard_normal((1, 4, 4, 6)))
    out = window_mhsa_forward(x, attn, 2).data
    for top in range(0, 4, 2):
        for left in range(0, 6, 2):
            expected = attn(Tensor(x.data[:, :, top : top + 2, left : left + 2])).data
            np.testing.assert_allclose(out[:, :, top : top + 2, left : left + 2], expected, atol=1e-10)
    with pytest.raises(ShapeError):
        window_mhsa_forward(x, attn, 4)


def test_swin_pair_counts_macs(rng: np.random.Generator) -> None:
    """A regular plus shifted window layer costs 8nd² + 4M²nd MACs."""
    regular, shifted = MultiHeadSelfAttention(4, 1, rng=rng), MultiHeadSelfAttention(4, 1, rng=rng)
    x = Tensor(rng.standard_normal((1, 4, 8, 8)))
    with count_macs() as counter:
        out = swin_pair_forward(x, regular, shifted, 4)
    n, d, window = 64, 4, 4
    assert counter.total == 8 * n * d * d + 4 * window * window * n * d
    assert out.shape == x.shape
    assert not out.requires_grad


def test_conv_project_composition(rng: np.random.Generator) -> None:
    """A projection is a depthwise conv, a pointwise conv and a flatten."""
    proj = ConvProjection(4, 3, rng=rng)
    x = Tensor(rng.standard_normal((2, 4, 3, 5)))
    expected = ops.conv2d(
        ops.conv2d(x, proj.depthwise.weight, padding=1, groups=4), proj.pointwise.weight
    ).data
    out = conv_project(x, proj).data
    assert out.shape == (2, 15, 4)
    np.testing.assert_array_equal(out, expected.reshape(2, 4, 15).transpose(0, 2, 1))


def test_conv_ffn_composition(rng: np.random.Generator) -> None:
    """The FFN is the residual around depthwise conv, GELU and pointwise conv."""
    ffn = ConvFFN(4, 3, rng=rng)
    x = Tensor(rng.standard_normal((1, 4, 5, 5)))
    hidden = ops.gelu(
        ops.conv2d(x, ffn.depthwise.weight, ffn.depthwise.bias, padding=1, groups=4)
    )
    expected = x + ops.conv2d(hidden, ffn.pointwise.weight, ffn.pointwise.bias)
    np.testing.assert_array_equal(conv_ffn(x, ffn).data, expected.data)


def test_conv_ffn_zero_weights_is_identity(rng: np.random.Generator) -> None:
    """Zeroed branch weights leave the token map unchanged."""
    ffn = ConvFFN(4, 3, rng=rng)
    for param in ffn.parameters():
        param.data[:] = 0.0
    x = Tensor(rng.standard_normal((1, 4, 5, 5)))
    np.testing.assert_array_equal(conv_ffn(x, ffn).data, x.data)
