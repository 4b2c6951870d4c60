"""Tests for configuration parsing and validation."""

from __future__ import annotations

import pytest

from medformer.config import (
    PRESETS,
    AugmentConfig,
    ModelConfig,
    RunConfig,
    config_hash,
    default_lr_gamma,
    load_run_config,
    parse_run_config,
    preset,
    validate_manifest,
)
from medformer.errors import ConfigError

RUN_FILE = """
# quick experiment
seed = 7
epochs = 3
batch_size = 2
lr_gamma = none
window = 32, 32
model.preset = micro
model.semantic_hw = 2, 1
model.attention = bmha
augment.enabled = false
augment.scale_range = 0.9, 1.1
"""


def test_defaults_validate() -> None:
    """The default configs are self-consistent."""
    assert ModelConfig().validate() == ModelConfig()
    run = RunConfig()
    assert run.augment == AugmentConfig()
    assert run.model.attention == "bmha"


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build(name: str) -> None:
    """Every preset validates and round-trips through its record."""
    config = preset(name)
    assert ModelConfig.from_dict(config.to_dict()) == config


def test_preset_overrides() -> None:
    """Overrides replace preset values."""
    config = preset("micro", num_classes=4)
    assert config.num_classes == 4
    assert config.widths == (8, 8, 8)
    with pytest.raises(ConfigError) as err:
        preset("huge")
    assert err.value.field == "model.preset"


@pytest.mark.parametrize(
    ("changes", "field"),
    [
        ({"heads": (3, 2, 2)}, "model.heads"),
        ({"widths": (8, 8)}, "model.widths"),
        ({"spatial_rank": 3}, "model.spatial_rank"),
        ({"kernel_size": 4}, "model.kernel_size"),
        ({"fusion_heads": 3}, "model.fusion_heads"),
        ({"num_classes": 1}, "model.num_classes"),
        ({"attention": "dense"}, "model.attention"),
        ({"attention": "linear", "reduction": "strided"}, "model.input_hw"),
        ({"attention": "linear", "reduction": "strided", "input_hw": (40, 32)}, "model.input_hw"),
        ({"colour": "red"}, "model.colour"),
    ],
)
def test_invalid_model_fields_are_named(changes: dict, field: str) -> None:
    """Validation errors carry the dotted name of the offending field."""
    with pytest.raises(ConfigError) as err:
        ModelConfig.from_dict({**PRESETS["micro"], **changes})
    assert err.value.field == field


def test_strided_linear_with_input_extent() -> None:
    """The strided variant is valid once the input extent is known."""
    config = preset("micro", attention="linear", reduction="strided", input_hw=(32, 32))
    assert config.input_hw == (32, 32)


def test_parse_run_file(tmp_path) -> None:
    """A flat run file fills nested sections and coerces values."""
    path = tmp_path / "run.cfg"
    path.write_text(RUN_FILE, encoding="utf-8")
    run = load_run_config(path)
    assert run.seed == 7
    assert run.epochs == 3
    assert run.window == (32, 32)
    assert run.lr_gamma is None
    assert run.model.widths == (8, 8, 8)
    assert run.model.semantic_hw == (2, 1)
    assert run.augment.enabled is False
    assert run.augment.scale_range == (0.9, 1.1)


@pytest.mark.parametrize(
    ("text", "field"),
    [
        ("epochs = 0", "epochs"),
        ("learning_rate = 0.1", "learning_rate"),
        ("optim.lr = 0.1", "optim.lr"),
        ("augment.flip = true", "augment.flip"),
        ("augment.scale_range = 1.2, 0.8", "augment.scale_range"),
        ("model.widths = 8, x, 8", "model.widths"),
    ],
)
def test_run_file_errors(text: str, field: str) -> None:
    """Bad run files are rejected naming the field."""
    with pytest.raises(ConfigError) as err:
        parse_run_config(text)
    assert err.value.field == field


def test_run_file_rejects_malformed_lines() -> None:
    """Lines without an equals sign are reported with their number."""
    with pytest.raises(ConfigError, match="Line 2"):
        parse_run_config("epochs = 2\nepochs 3\n")


def test_default_gamma_reaches_final_rate() -> None:
    """Over a full run the rate drops thirty-fold."""
    assert default_lr_gamma(10) ** 10 == pytest.approx(1 / 30)
    assert RunConfig(epochs=4).gamma ** 4 == pytest.approx(1 / 30)
    assert RunConfig(lr_gamma=0.5).gamma == 0.5


def test_config_hash_is_canonical() -> None:
    """Equal configs hash equally, any change alters the hash."""
    assert config_hash(RunConfig()) == config_hash(RunConfig.from_dict({}))
    assert config_hash(RunConfig()) != config_hash(RunConfig(seed=1))
    assert len(config_hash(RunConfig())) == 64


def test_manifest_validation() -> None:
    """A dataset index needs its cases with id, spacing and split."""
    good = {"cases": [{"id": "a", "spacing": [1.0, 1.0], "split": "train", "note": "x"}]}
    assert validate_manifest(good)["cases"][0] == {
        "id": "a",
        "spacing": (1.0, 1.0),
        "split": "train",
    }
    with pytest.raises(ConfigError):
        validate_manifest({})
    with pytest.raises(ConfigError) as err:
        validate_manifest({"cases": [{"id": "a", "spacing": [1.0], "split": "train"}]})
    assert err.value.field.startswith("manifest.cases")
