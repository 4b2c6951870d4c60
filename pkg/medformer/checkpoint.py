"""
Model checkpoints.

Layout, all integers little-endian::

    magic    7 bytes   b"MFCKPT1"
    config   u32 length + UTF-8 JSON record {"model": {...}, "meta": {...}}
    count    u32
    entries  count × (u16 name length, name, dtype u8, rank u8, rank × u64, payload)

Entries are sorted by name; payloads use the same encoding as MFT files.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from .config import ModelConfig
from .const import CHECKPOINT_MAGIC
from .errors import FormatError, ShapeError
from .mft import decode_array, encode_array

if TYPE_CHECKING:
    from .model import MedFormer
    from .nn import Module

_LOGGER = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    """Decoded checkpoint contents."""

    config: ModelConfig
    parameters: dict[str, np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(
    config: ModelConfig, parameters: dict[str, np.ndarray], meta: dict[str, Any] | None = None
) -> bytes:
    """Serialise a config and named parameter arrays."""
    record = json.dumps({"model": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(record)), record]
    chunks.append(struct.pack("<I", len(parameters)))
    for name in sorted(parameters):
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(encode_array(parameters[name]))
    return b"".join(chunks)


def decode_checkpoint(buffer: bytes) -> Checkpoint:
    """Parse a checkpoint image."""
    view = memoryview(buffer)
    if bytes(view[: len(CHECKPOINT_MAGIC)]) != CHECKPOINT_MAGIC:
        msg = f"bad magic {bytes(view[: len(CHECKPOINT_MAGIC)])!r}, expected {CHECKPOINT_MAGIC!r}"
        raise FormatError(msg, 0)
    offset = len(CHECKPOINT_MAGIC)

    def take(fmt: str) -> tuple:
        nonlocal offset
        size = struct.calcsize(fmt)
        if len(view) < offset + size:
            msg = f"truncated field: need {size} bytes, have {len(view) - offset}"
            raise FormatError(msg, offset)
        values = struct.unpack_from(fmt, view, offset)
        offset += size
        return values

    (length,) = take("<I")
    if len(view) < offset + length:
        msg = f"truncated config record: expected {length} bytes, got {len(view) - offset}"
        raise FormatError(msg, offset)
    try:
        record = json.loads(bytes(view[offset : offset + length]).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        msg = f"unreadable config record: {err}"
        raise FormatError(msg, offset) from err
    offset += length
    config = ModelConfig.from_dict(record.get("model", {}))

    (count,) = take("<I")
    parameters: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = take("<H")
        if len(view) < offset + name_length:
            msg = "truncated parameter name"
            raise FormatError(msg, offset)
        name = bytes(view[offset : offset + name_length]).decode()
        offset += name_length
        parameters[name], offset = decode_array(view, offset)
    if offset != len(view):
        msg = f"{len(view) - offset} trailing bytes after the last entry"
        raise FormatError(msg, offset)
    return Checkpoint(config=config, parameters=parameters, meta=record.get("meta", {}))


def save_checkpoint(
    path: str | Path, model: MedFormer, meta: dict[str, Any] | None = None
) -> None:
    """Write ``model`` to ``path`` through a temporary file."""
    path = Path(path)
    params = {name: param.data for name, param in model.named_parameters()}
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(model.cfg, params, meta))
    tmp.replace(path)
    _LOGGER.debug("Saved %d parameter tensors to %s", len(params), path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read the checkpoint at ``path``."""
    return decode_checkpoint(Path(path).read_bytes())


def assign_parameters(model: Module, parameters: dict[str, np.ndarray]) -> None:
    """Copy ``parameters`` into ``model``; names and shapes must match exactly."""
    own = dict(model.named_parameters())
    missing, unexpected = sorted(set(own) - set(parameters)), sorted(set(parameters) - set(own))
    if missing or unexpected:
        msg = f"checkpoint parameters disagree with the model: missing {missing[:3]}, unexpected {unexpected[:3]}"
        raise ShapeError(msg)
    for name, param in own.items():
        value = parameters[name]
        if value.shape != param.shape:
            msg = f"parameter '{name}' has shape {value.shape} in the checkpoint, {param.shape} in the model"
            raise ShapeError(msg)
        param.data = np.array(value, copy=True)
        param.grad = None


def load_parameters(path: str | Path, model: Module) -> Checkpoint:
    """Overwrite the parameters of ``model`` with those stored at ``path``."""
    checkpoint = load_checkpoint(path)
    assign_parameters(model, checkpoint.parameters)
    return checkpoint


def restore(path: str | Path) -> tuple[MedFormer, Checkpoint]:
    """Rebuild the model stored at ``path``."""
    from .model import build

    checkpoint = load_checkpoint(path)
    model = build(checkpoint.config)
    assign_parameters(model, checkpoint.parameters)
    _LOGGER.info("Restored %s (%d parameters)", path, model.parameter_count())
    return model, checkpoint
