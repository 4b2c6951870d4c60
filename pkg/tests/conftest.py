"""Fixture definitions for medformer tests."""

from __future__ import annotations

import numpy as np
import pytest

from medformer.config import ModelConfig, RunConfig, preset
from medformer.model import MedFormer, build
from medformer.synthetic import synth_task
from medformer.tensor import Tensor, using_dtype

SEED = 1234
GRAD_TOL = 1e-4
GRAD_SEEDS = range(20)
IMAGE_HW = (16, 16)
NUM_CLASSES = 2


def pytest_addoption(parser: pytest.Parser) -> None:
    """Register the switch for full-size acceptance runs."""
    parser.addoption(
        "--acceptance",
        action="store_true",
        default=False,
        help="run the full-size training acceptance checks",
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    """Skip acceptance runs unless requested."""
    if config.getoption("--acceptance"):
        return
    skip = pytest.mark.skip(reason="needs --acceptance")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)


def leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    """Float64 tensor that requires grad."""
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce ``out`` to a scalar of order one with fixed random coefficients."""
    weights = Tensor(rng.standard_normal(out.shape) / np.sqrt(out.size), dtype=out.dtype)
    return (out * weights).sum()


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator."""
    return np.random.default_rng(SEED)


@pytest.fixture
def micro_config() -> ModelConfig:
    """Smallest architecture that still has every component."""
    return preset("micro")


@pytest.fixture
def micro_model(micro_config: ModelConfig) -> MedFormer:
    """Float64 micro model for gradient checks."""
    with using_dtype(np.float64):
        return build(micro_config, seed=0)


@pytest.fixture
def micro_model_f32(micro_config: ModelConfig) -> MedFormer:
    """Float32 micro model for pipeline tests."""
    return build(micro_config, seed=0)


@pytest.fixture
def synthetic_samples() -> list:
    """Eight seeded 16×16 two-class samples."""
    return synth_task(np.random.default_rng(SEED), 8, *IMAGE_HW, NUM_CLASSES)


@pytest.fixture
def quick_run(micro_config: ModelConfig) -> RunConfig:
    """Two-epoch run without augmentation."""
    return RunConfig.from_dict(
        {
            "model": micro_config.to_dict(),
            "augment": {"enabled": False},
            "epochs": 2,
            "batch_size": 4,
            "eval_every": 1,
            "checkpoint_every": 1,
        }
    )
