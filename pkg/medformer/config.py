"""Model and run configuration: dataclasses, voluptuous schemas, presets and the run-file parser."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import voluptuous as vol

from .const import (
    ATTENTION_VARIANTS,
    AUGMENT_PROBABILITY,
    BRIGHTNESS_RANGE,
    CONTRAST_RANGE,
    DEFAULT_ADAM_EPS,
    DEFAULT_AUX_LOSS_WEIGHT,
    DEFAULT_BETAS,
    DEFAULT_FUSION_BLOCKS,
    DEFAULT_FUSION_HEADS,
    DEFAULT_GRAD_CLIP,
    DEFAULT_KERNEL_SIZE,
    DEFAULT_LR,
    DEFAULT_LR_DECAY_FACTOR,
    DEFAULT_SEMANTIC_HW,
    DEFAULT_WEIGHT_DECAY,
    MIN_INPUT_DIVISOR,
    NOISE_SIGMA_MAX,
    PADDING_MODES,
    REDUCTION_MODES,
    ROTATION_RANGE_DEG,
    SCALE_RANGE,
)
from .errors import ConfigError

_LOGGER = logging.getLogger(__name__)

LEVELS = 3


def _tuple_of(kind: type, length: int | None = None) -> Any:
    """Build a validator accepting a sequence or a comma-separated string."""

    def validator(value: Any) -> tuple:
        if isinstance(value, str):
            value = [part for part in (p.strip() for p in value.split(",")) if part]
        if not isinstance(value, (list, tuple)):
            msg = f"expected a sequence, got {value!r}"
            raise vol.Invalid(msg)
        try:
            items = tuple(kind(v) for v in value)
        except (TypeError, ValueError) as err:
            msg = f"expected {kind.__name__} values, got {value!r}"
            raise vol.Invalid(msg) from err
        if length is not None and len(items) != length:
            msg = f"expected {length} values, got {len(items)}"
            raise vol.Invalid(msg)
        return items

    return validator


_POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))
_NON_NEGATIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0.0))

MODEL_SCHEMA = vol.Schema(
    {
        vol.Optional("in_channels"): _POSITIVE_INT,
        vol.Optional("num_classes"): vol.All(vol.Coerce(int), vol.Range(min=2)),
        vol.Optional("base_width"): _POSITIVE_INT,
        vol.Optional("widths"): _tuple_of(int, LEVELS),
        vol.Optional("blocks"): _tuple_of(int, LEVELS),
        vol.Optional("heads"): _tuple_of(int, LEVELS),
        vol.Optional("semantic_hw"): _tuple_of(int, 2),
        vol.Optional("aux_loss_weight"): _NON_NEGATIVE_FLOAT,
        vol.Optional("spatial_rank"): vol.Coerce(int),
        vol.Optional("kernel_size"): _POSITIVE_INT,
        vol.Optional("fusion_width"): _POSITIVE_INT,
        vol.Optional("fusion_blocks"): _POSITIVE_INT,
        vol.Optional("fusion_heads"): _POSITIVE_INT,
        vol.Optional("decoder_blocks"): _tuple_of(int, LEVELS),
        vol.Optional("attention"): vol.In(ATTENTION_VARIANTS),
        vol.Optional("reduction"): vol.In(REDUCTION_MODES),
        vol.Optional("input_hw"): vol.Any(None, _tuple_of(int, 2)),
        vol.Optional("padding_mode"): vol.In(PADDING_MODES),
        vol.Optional("share_qk"): vol.Boolean(),
    }
)

AUGMENT_SCHEMA = vol.Schema(
    {
        vol.Optional("enabled"): vol.Boolean(),
        vol.Optional("probability"): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0)),
        vol.Optional("rotation_deg"): _NON_NEGATIVE_FLOAT,
        vol.Optional("scale_range"): _tuple_of(float, 2),
        vol.Optional("brightness"): _NON_NEGATIVE_FLOAT,
        vol.Optional("contrast_range"): _tuple_of(float, 2),
        vol.Optional("noise_sigma_max"): _NON_NEGATIVE_FLOAT,
        vol.Optional("crop_size"): vol.Any(None, _tuple_of(int, 2)),
    }
)

RUN_SCHEMA = vol.Schema(
    {
        vol.Optional("seed"): vol.All(vol.Coerce(int), vol.Range(min=0)),
        vol.Optional("epochs"): _POSITIVE_INT,
        vol.Optional("batch_size"): _POSITIVE_INT,
        vol.Optional("lr"): _NON_NEGATIVE_FLOAT,
        vol.Optional("lr_gamma"): vol.Any(
            None, vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))
        ),
        vol.Optional("betas"): _tuple_of(float, 2),
        vol.Optional("eps"): vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False)),
        vol.Optional("weight_decay"): _NON_NEGATIVE_FLOAT,
        vol.Optional("grad_clip"): vol.Any(None, _NON_NEGATIVE_FLOAT),
        vol.Optional("eval_every"): _POSITIVE_INT,
        vol.Optional("checkpoint_every"): _POSITIVE_INT,
        vol.Optional("window"): vol.Any(None, _tuple_of(int, 2)),
        vol.Optional("workers"): _POSITIVE_INT,
    }
)


CASE_SCHEMA = vol.Schema(
    {
        vol.Required("id"): vol.All(str, vol.Length(min=1)),
        vol.Required("spacing"): _tuple_of(float, 2),
        vol.Required("split"): vol.All(str, vol.Length(min=1)),
    },
    extra=vol.REMOVE_EXTRA,
)

MANIFEST_SCHEMA = vol.Schema(
    {
        vol.Required("cases"): [CASE_SCHEMA],
        vol.Optional("num_classes"): vol.All(vol.Coerce(int), vol.Range(min=2)),
        vol.Optional("in_channels"): _POSITIVE_INT,
    },
    extra=vol.ALLOW_EXTRA,
)


def _validate(schema: vol.Schema, data: dict[str, Any], section: str) -> dict[str, Any]:
    """Run ``schema`` and translate voluptuous errors into ``ConfigError``."""
    try:
        return schema(dict(data))
    except vol.MultipleInvalid as err:
        first = err.errors[0]
        path = ".".join(str(p) for p in first.path)
        name = f"{section}.{path}" if section else path
        msg = f"Invalid configuration field '{name}': {first.msg}"
        raise ConfigError(msg, name) from err


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of one MedFormer network."""

    in_channels: int = 1
    num_classes: int = 2
    base_width: int = 16
    widths: tuple[int, int, int] = (32, 64, 128)
    blocks: tuple[int, int, int] = (2, 2, 2)
    heads: tuple[int, int, int] = (2, 4, 8)
    semantic_hw: tuple[int, int] = DEFAULT_SEMANTIC_HW
    aux_loss_weight: float = DEFAULT_AUX_LOSS_WEIGHT
    spatial_rank: int = 2
    kernel_size: int = DEFAULT_KERNEL_SIZE
    fusion_width: int = 64
    fusion_blocks: int = DEFAULT_FUSION_BLOCKS
    fusion_heads: int = DEFAULT_FUSION_HEADS
    decoder_blocks: tuple[int, int, int] = (1, 1, 1)
    attention: str = "bmha"
    reduction: str = "pool"
    input_hw: tuple[int, int] | None = None
    padding_mode: str = "zeros"
    share_qk: bool = True

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelConfig:
        """Validate ``data`` and build a config; missing keys keep their defaults."""
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            name = f"model.{sorted(unknown)[0]}"
            msg = f"Unknown configuration field '{name}'"
            raise ConfigError(msg, name)
        config = cls(**_validate(MODEL_SCHEMA, data, "model"))
        config.validate()
        return config

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-serialisable record."""
        return {
            key: list(value) if isinstance(value, tuple) else value
            for key, value in dataclasses.asdict(self).items()
        }

    def replace(self, **changes: Any) -> ModelConfig:
        """Return a validated copy with ``changes`` applied."""
        return ModelConfig.from_dict({**self.to_dict(), **changes})

    def validate(self) -> ModelConfig:
        """Check cross-field invariants, raising ``ConfigError`` that names the field."""

        def fail(name: str, message: str) -> None:
            msg = f"Invalid configuration field 'model.{name}': {message}"
            raise ConfigError(msg, f"model.{name}")

        if self.spatial_rank == 3:  # noqa: PLR2004
            fail(
                "spatial_rank",
                "volumetric (rank 3) networks are not supported; only planar (rank 2) "
                "networks are built, slice volumes into 2D cases instead",
            )
        if self.spatial_rank != 2:  # noqa: PLR2004
            fail("spatial_rank", f"must be 2, got {self.spatial_rank}")
        for name in ("widths", "blocks", "heads", "decoder_blocks"):
            values = getattr(self, name)
            if len(values) != LEVELS or min(values) < 1:
                fail(name, f"needs {LEVELS} positive entries, got {values}")
        for level, (width, heads) in enumerate(zip(self.widths, self.heads, strict=True)):
            if width % heads:
                fail("heads", f"level {level} width {width} is not divisible by {heads} heads")
        if self.fusion_width % self.fusion_heads:
            fail(
                "fusion_heads",
                f"fusion width {self.fusion_width} is not divisible by {self.fusion_heads} heads",
            )
        if self.kernel_size % 2 == 0:
            fail("kernel_size", f"must be odd, got {self.kernel_size}")
        if min(self.semantic_hw) < 1:
            fail("semantic_hw", f"needs positive extents, got {self.semantic_hw}")
        if self.aux_loss_weight < 0:
            fail("aux_loss_weight", f"must be non-negative, got {self.aux_loss_weight}")
        if self.attention == "linear" and self.reduction == "strided":
            if self.input_hw is None:
                fail("input_hw", "strided reduction needs the training input extent")
            elif any(extent % MIN_INPUT_DIVISOR for extent in self.input_hw):
                fail("input_hw", f"extents must be divisible by {MIN_INPUT_DIVISOR}")
        return self


@dataclass(frozen=True)
class AugmentConfig:
    """On-the-fly augmentation probabilities and ranges."""

    enabled: bool = True
    probability: float = AUGMENT_PROBABILITY
    rotation_deg: float = ROTATION_RANGE_DEG
    scale_range: tuple[float, float] = SCALE_RANGE
    brightness: float = BRIGHTNESS_RANGE
    contrast_range: tuple[float, float] = CONTRAST_RANGE
    noise_sigma_max: float = NOISE_SIGMA_MAX
    crop_size: tuple[int, int] | None = None


def default_lr_gamma(epochs: int, factor: float = DEFAULT_LR_DECAY_FACTOR) -> float:
    """Return the per-epoch decay that lowers the rate ``factor``-fold over ``epochs``."""
    return (1.0 / factor) ** (1.0 / max(epochs, 1))


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs besides the data."""

    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    epochs: int = 30
    batch_size: int = 4
    lr: float = DEFAULT_LR
    lr_gamma: float | None = None
    betas: tuple[float, float] = DEFAULT_BETAS
    eps: float = DEFAULT_ADAM_EPS
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    grad_clip: float | None = DEFAULT_GRAD_CLIP
    eval_every: int = 5
    checkpoint_every: int = 5
    window: tuple[int, int] | None = None
    workers: int = 1

    @property
    def gamma(self) -> float:
        """Per-epoch learning-rate decay."""
        return default_lr_gamma(self.epochs) if self.lr_gamma is None else self.lr_gamma

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        """Build a run config from a nested dict (``model`` and ``augment`` sections)."""
        data = dict(data)
        model_data = dict(data.pop("model", None) or {})
        augment_data = dict(data.pop("augment", None) or {})
        preset_name = model_data.pop("preset", None)
        model = (
            preset(preset_name, **model_data)
            if preset_name
            else ModelConfig.from_dict(model_data)
        )
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            name = sorted(unknown)[0]
            msg = f"Unknown configuration field '{name}'"
            raise ConfigError(msg, name)
        augment_fields = {f.name for f in dataclasses.fields(AugmentConfig)}
        unknown_aug = set(augment_data) - augment_fields
        if unknown_aug:
            name = f"augment.{sorted(unknown_aug)[0]}"
            msg = f"Unknown configuration field '{name}'"
            raise ConfigError(msg, name)
        augment = AugmentConfig(**_validate(AUGMENT_SCHEMA, augment_data, "augment"))
        run = cls(model=model, augment=augment, **_validate(RUN_SCHEMA, data, ""))
        lo, hi = augment.scale_range
        if not 0 < lo <= hi:
            msg = f"Invalid configuration field 'augment.scale_range': {augment.scale_range}"
            raise ConfigError(msg, "augment.scale_range")
        return run

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-serialisable record."""

        def plain(value: Any) -> Any:
            if isinstance(value, tuple):
                return list(value)
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items()}
            return value

        return plain(dataclasses.asdict(self))

    def replace(self, **changes: Any) -> RunConfig:
        """Return a copy with top-level ``changes`` applied."""
        return dataclasses.replace(self, **changes)


def config_hash(run: RunConfig) -> str:
    """Return the SHA-256 of the canonical JSON form of ``run``."""
    canonical = json.dumps(run.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


PRESETS: dict[str, dict[str, Any]] = {
    "tiny": {
        "base_width": 16,
        "widths": (32, 64, 64),
        "blocks": (1, 1, 1),
        "heads": (2, 4, 4),
        "semantic_hw": (4, 4),
        "fusion_width": 32,
        "fusion_blocks": 1,
        "fusion_heads": 4,
        "decoder_blocks": (1, 1, 1),
    },
    "micro": {
        "base_width": 4,
        "widths": (8, 8, 8),
        "blocks": (1, 1, 1),
        "heads": (2, 2, 2),
        "semantic_hw": (2, 2),
        "fusion_width": 8,
        "fusion_blocks": 1,
        "fusion_heads": 2,
        "decoder_blocks": (1, 1, 1),
    },
    "cardiac": {
        "base_width": 32,
        "widths": (64, 128, 256),
        "blocks": (2, 2, 2),
        "heads": (2, 4, 8),
        "semantic_hw": (4, 4),
        "fusion_width": 128,
    },
    "bcv": {
        "base_width": 32,
        "widths": (64, 128, 256),
        "blocks": (2, 4, 6),
        "heads": (2, 4, 8),
        "semantic_hw": (4, 4),
        "fusion_width": 128,
    },
}


def preset(name: str, **overrides: Any) -> ModelConfig:
    """Return the named preset with ``overrides`` applied."""
    if name not in PRESETS:
        msg = f"Unknown preset '{name}', expected one of {sorted(PRESETS)}"
        raise ConfigError(msg, "model.preset")
    return ModelConfig.from_dict({**PRESETS[name], **overrides})


def parse_run_config(text: str) -> RunConfig:
    """
    Parse a flat ``key = value`` run file.

    ``#`` starts a comment, tuples are comma-separated, model keys are
    prefixed ``model.`` and augmentation keys ``augment.``; ``model.preset``
    selects a preset the other model keys override.
    """
    data: dict[str, Any] = {"model": {}, "augment": {}}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            msg = f"Line {number}: expected 'key = value', got '{raw.strip()}'"
            raise ConfigError(msg)
        key, value = (part.strip() for part in line.split("=", 1))
        parsed: Any = None if value.lower() == "none" else value
        section, _, name = key.rpartition(".")
        if section in ("model", "augment"):
            data[section][name] = parsed
        elif section:
            msg = f"Unknown configuration field '{key}'"
            raise ConfigError(msg, key)
        else:
            data[key] = parsed
    _LOGGER.debug("Parsed run config keys: %s", sorted(k for k in data if data[k] is not None))
    return RunConfig.from_dict(data)


def load_run_config(path: str | Path) -> RunConfig:
    """Read and parse a run file."""
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def validate_manifest(data: dict[str, Any]) -> dict[str, Any]:
    """Validate a dataset index, raising ``ConfigError`` naming the bad key."""
    return _validate(MANIFEST_SCHEMA, data, "manifest")
