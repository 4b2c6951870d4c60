"""Tests for semantic map initialisation and token similarity."""

from __future__ import annotations

import numpy as np
import pytest

from medformer.errors import DegenerateTokenError, ShapeError
from medformer.gradcheck import grad_check
from medformer.semantic_map import SemanticMapInit, init_semantic_map, token_cosine_similarity
from medformer.tensor import Tensor, using_dtype

from .conftest import GRAD_SEEDS, GRAD_TOL, leaf, weighted_sum


@pytest.mark.parametrize("hw", [(8, 8), (12, 8), (4, 20)])
def test_output_extent_is_fixed(rng: np.random.Generator, hw: tuple[int, int]) -> None:
    """Any input extent aggregates to the configured semantic extent."""
    init = SemanticMapInit(8, (2, 3), rng=rng)
    m = init_semantic_map(Tensor(rng.standard_normal((2, 8, *hw))), init)
    assert m.shape == (2, 8, 2, 3)


def test_semantic_tokens_are_convex_combinations(rng: np.random.Generator) -> None:
    """Weights are row-stochastic and every token lies inside the base-token hull."""
    with using_dtype(np.float64):
        init = SemanticMapInit(8, (2, 2), rng=rng)
    x = Tensor(rng.standard_normal((1, 8, 6, 6)) * 4.0)
    weights = init.aggregation_weights(x).data
    assert weights.shape == (1, 4, 36)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)
    assert weights.min() > 0.0

    base = init.base_conv(x).data.reshape(8, -1)
    tokens = init(x).data.reshape(8, -1)
    assert np.all(tokens <= base.max(axis=1, keepdims=True) + 1e-12)
    assert np.all(tokens >= base.min(axis=1, keepdims=True) - 1e-12)


def test_constant_base_gives_constant_tokens(rng: np.random.Generator) -> None:
    """Averaging identical tokens reproduces them exactly."""
    with using_dtype(np.float64):
        init = SemanticMapInit(8, (2, 2), rng=rng)
    init.base_conv.weight.data[:] = 0.0
    init.base_conv.bias.data = np.arange(8, dtype=np.float64)
    m = init(Tensor(rng.standard_normal((1, 8, 4, 4)))).data
    np.testing.assert_allclose(m[0], np.broadcast_to(np.arange(8.0)[:, None, None], (8, 2, 2)))


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_init_gradient(seed: int) -> None:
    """Initialisation passes the finite-difference check."""
    rng = np.random.default_rng(seed)
    with using_dtype(np.float64):
        init = SemanticMapInit(4, (2, 2), rng=rng)
    x = leaf(rng, 1, 4, 4, 4)
    err = grad_check(
        lambda: weighted_sum(init(x), np.random.default_rng(seed + 100)),
        [x, *init.parameters()],
        samples=10,
        rng=np.random.default_rng(seed),
    )
    assert err < GRAD_TOL


def test_cosine_similarity_properties(rng: np.random.Generator) -> None:
    """The matrix is symmetric with a unit diagonal and entries in [0, 1]."""
    sim = token_cosine_similarity(rng.standard_normal((8, 2, 3)))
    assert sim.shape == (6, 6)
    np.testing.assert_allclose(sim, sim.T)
    np.testing.assert_array_equal(np.diag(sim), 1.0)
    assert sim.min() >= 0.0
    assert sim.max() <= 1.0 + 1e-12


def test_cosine_similarity_is_absolute() -> None:
    """Opposite tokens are fully similar, orthogonal ones not at all."""
    m = np.zeros((2, 1, 3))
    m[:, 0, 0] = [1.0, 0.0]
    m[:, 0, 1] = [-2.0, 0.0]
    m[:, 0, 2] = [0.0, 3.0]
    sim = token_cosine_similarity(Tensor(m[None]))
    assert sim[0, 1] == pytest.approx(1.0)
    assert sim[0, 2] == pytest.approx(0.0)


def test_cosine_similarity_rejects_degenerate_tokens() -> None:
    """A zero-norm token is reported by index."""
    m = np.ones((4, 2, 2))
    m[:, 1, 0] = 0.0
    with pytest.raises(DegenerateTokenError) as err:
        token_cosine_similarity(m)
    assert err.value.index == 2


def test_cosine_similarity_rejects_batches() -> None:
    """Only one map at a time."""
    with pytest.raises(ShapeError):
        token_cosine_similarity(np.ones((2, 4, 2, 2)))
    with pytest.raises(ShapeError):
        token_cosine_similarity(np.ones((4, 4)))
