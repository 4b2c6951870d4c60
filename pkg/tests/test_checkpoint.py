"""Tests for checkpoint files."""

from __future__ import annotations

import numpy as np
import pytest

from medformer.checkpoint import (
    assign_parameters,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from medformer.config import ModelConfig
from medformer.errors import FormatError, ShapeError
from medformer.model import MedFormer


@pytest.fixture
def params(rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Two named arrays of different types."""
    return {
        "b.weight": rng.standard_normal((2, 3)).astype(np.float32),
        "a.bias": np.arange(4, dtype=np.float64),
    }


def test_round_trip(micro_config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    """Config, parameters and meta survive encoding."""
    checkpoint = decode_checkpoint(encode_checkpoint(micro_config, params, {"epoch": 3}))
    assert checkpoint.config == micro_config
    assert checkpoint.meta == {"epoch": 3}
    assert list(checkpoint.parameters) == ["a.bias", "b.weight"]
    for name, value in params.items():
        assert checkpoint.parameters[name].dtype == value.dtype
        np.testing.assert_array_equal(checkpoint.parameters[name], value)


def test_bad_magic(micro_config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    """Foreign files are rejected at offset zero."""
    encoded = encode_checkpoint(micro_config, params)
    with pytest.raises(FormatError) as err:
        decode_checkpoint(b"X" + encoded[1:])
    assert err.value.offset == 0


def test_every_truncation_is_detected(
    micro_config: ModelConfig, params: dict[str, np.ndarray]
) -> None:
    """Cutting the file anywhere raises a format error, never a crash."""
    encoded = encode_checkpoint(micro_config, params)
    for end in range(len(encoded)):
        with pytest.raises(FormatError):
            decode_checkpoint(encoded[:end])


def test_trailing_bytes(micro_config: ModelConfig, params: dict[str, np.ndarray]) -> None:
    """Bytes after the last entry are an error."""
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(encode_checkpoint(micro_config, params) + b"\x00")


def test_unreadable_record(micro_config: ModelConfig) -> None:
    """A config record that is not JSON is reported."""
    encoded = bytearray(encode_checkpoint(micro_config, {}))
    encoded[11] = ord("!")
    with pytest.raises(FormatError, match="unreadable config record"):
        decode_checkpoint(bytes(encoded))


def test_assign_checks_names_and_shapes(micro_model_f32: MedFormer) -> None:
    """Missing, unexpected and reshaped parameters are refused."""
    own = {name: p.data.copy() for name, p in micro_model_f32.named_parameters()}
    name = next(iter(own))
    with pytest.raises(ShapeError, match="missing"):
        assign_parameters(micro_model_f32, {k: v for k, v in own.items() if k != name})
    with pytest.raises(ShapeError, match="unexpected"):
        assign_parameters(micro_model_f32, {**own, "extra.weight": np.zeros(1)})
    with pytest.raises(ShapeError, match=name):
        assign_parameters(micro_model_f32, {**own, name: np.zeros((1, 1, 1, 1, 1))})


def test_save_replaces_atomically(micro_model_f32: MedFormer, tmp_path) -> None:
    """The temporary file is renamed over the target."""
    path = tmp_path / "last.ckpt"
    path.write_bytes(b"stale")
    save_checkpoint(path, micro_model_f32, {"epoch": 1})
    assert not (tmp_path / "last.ckpt.tmp").exists()
    checkpoint = load_checkpoint(path)
    assert checkpoint.meta == {"epoch": 1}
    assert len(checkpoint.parameters) == len(list(micro_model_f32.named_parameters()))
