"""Training loop, evaluation and run-directory bookkeeping."""

from __future__ import annotations

import json
import logging
import math
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from .checkpoint import save_checkpoint
from .config import RunConfig, config_hash
from .const import (
    AUX_SCALE,
    CHECKPOINT_DIR,
    LAST_CHECKPOINT_NAME,
    RUN_MANIFEST_NAME,
    RUN_METRICS_NAME,
)
from .dataset import BatchLoader
from .errors import ContractError, NonFiniteGradientError, TrainingAborted
from .inference import sliding_window_infer
from .losses import softmax_probs, total_loss
from .metrics import evaluate_cases
from .optim import AdamW, clip_grad_norm, lr_schedule
from .tensor import Tensor

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .data import SegSample
    from .model import MedFormer

_LOGGER = logging.getLogger(__name__)


def version_string() -> str:
    """Return ``git describe`` output when available, else the package version."""
    from . import __version__

    try:
        result = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],  # noqa: S607
            capture_output=True,
            text=True,
            check=True,
            timeout=5,
            cwd=Path(__file__).parent,
        )
    except (OSError, subprocess.SubprocessError):
        return f"v{__version__}"
    return result.stdout.strip() or f"v{__version__}"


def downsample_labels(labels: np.ndarray, factor: int = AUX_SCALE) -> np.ndarray:
    """Nearest-neighbour label downsampling by ``factor``."""
    return labels[..., ::factor, ::factor]


@dataclass(frozen=True)
class StepLosses:
    """Loss values of one optimizer step."""

    total: float
    main: float
    aux: float


def evaluate(
    model: MedFormer,
    samples: Sequence[SegSample],
    window: tuple[int, int] | None = None,
) -> pd.DataFrame:
    """
    Predict every sample with sliding windows and score it.

    Returns the per-case, per-class report (``case_id, class, dsc, hd95``).
    The window defaults to the whole image.
    """
    num_classes = model.cfg.num_classes

    def cases():
        for sample in samples:
            probs = sliding_window_infer(
                model.predict_logits, sample.image, window or sample.shape
            )
            yield sample.case_id, probs.argmax(axis=0), sample.label, sample.spacing

    return evaluate_cases(cases(), num_classes)


class Trainer:
    """
    Own one training run: data loading, optimizer, schedule and artefacts.

    With an output directory the trainer keeps ``metrics.csv`` (one row per
    epoch), ``manifest.json`` and ``checkpoints/last.ckpt`` up to date.
    """

    def __init__(
        self,
        model: MedFormer,
        train_samples: Sequence[SegSample],
        val_samples: Sequence[SegSample] | None,
        cfg: RunConfig,
        out_dir: str | Path | None = None,
    ) -> None:
        """Prepare the loader and optimizer."""
        self.model = model
        self.cfg = cfg
        self.val_samples = list(val_samples or [])
        self.out_dir = Path(out_dir) if out_dir is not None else None
        augment_cfg = cfg.augment if (cfg.augment.enabled or cfg.augment.crop_size) else None
        self.loader = BatchLoader(
            train_samples,
            cfg.batch_size,
            seed=cfg.seed,
            augment_cfg=augment_cfg,
            workers=cfg.workers,
        )
        self.optimizer = AdamW(
            list(model.named_parameters()),
            lr=cfg.lr,
            betas=cfg.betas,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )
        self.history: list[dict] = []

    def train_step(self, images: np.ndarray, labels: np.ndarray) -> StepLosses:
        """Run forward, backward and one optimizer update on a batch."""
        output = self.model(Tensor(images, dtype=self.model.stem_in.weight.dtype))
        main = total_loss(softmax_probs(output.logits), labels)
        weight = self.model.cfg.aux_loss_weight
        loss, aux_value = main, 0.0
        if weight > 0:
            aux = total_loss(softmax_probs(output.aux_logits), downsample_labels(labels))
            loss = main + aux * weight
            if not np.array_equal(loss.data, main.data + aux.data * weight, equal_nan=True):
                msg = "optimized loss differs from main + weight * aux"
                raise ContractError(msg)
            aux_value = aux.item()

        if not math.isfinite(loss.item()):
            _LOGGER.error("Loss became %s; aborting", loss.item())
            msg = f"non-finite loss {loss.item()}"
            raise TrainingAborted(msg)

        self.optimizer.zero_grad()
        loss.backward()
        if self.cfg.grad_clip:
            clip_grad_norm(self.optimizer.params, self.cfg.grad_clip)
        try:
            self.optimizer.step()
        except NonFiniteGradientError as err:
            msg = f"non-finite gradient for parameter '{err.name}'"
            raise TrainingAborted(msg) from err
        return StepLosses(total=loss.item(), main=main.item(), aux=aux_value)

    def validate(self) -> float:
        """Mean foreground DSC over the validation samples."""
        report = evaluate(self.model, self.val_samples, self.cfg.window)
        return float(report["dsc"].mean())

    def _write_manifest(self, status: str) -> None:
        if self.out_dir is None:
            return
        manifest = {
            "seed": self.cfg.seed,
            "config_hash": config_hash(self.cfg),
            "version": version_string(),
            "workers": self.cfg.workers,
            "parameters": self.model.parameter_count(),
            "status": status,
            "epochs_completed": len(self.history),
            "config": self.cfg.to_dict(),
        }
        path = self.out_dir / RUN_MANIFEST_NAME
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")

    def _checkpoint(self, epoch: int) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / CHECKPOINT_DIR / LAST_CHECKPOINT_NAME
        save_checkpoint(path, self.model, meta={"epoch": epoch, "seed": self.cfg.seed})
        _LOGGER.info("Saved checkpoint for epoch %d to %s", epoch, path)

    def _write_metrics(self) -> None:
        if self.out_dir is not None:
            pd.DataFrame(self.history).to_csv(self.out_dir / RUN_METRICS_NAME, index=False)

    def run(self) -> pd.DataFrame:
        """Train for every configured epoch and return the per-epoch history."""
        if self.out_dir is not None:
            (self.out_dir / CHECKPOINT_DIR).mkdir(parents=True, exist_ok=True)
        self._write_manifest("running")
        epochs = self.cfg.epochs
        for epoch in range(epochs):
            self.optimizer.lr = lr_schedule(self.cfg.lr, self.cfg.gamma, epoch)
            steps: list[StepLosses] = []
            try:
                for images, labels in self.loader.epoch(epoch):
                    steps.append(self.train_step(images, labels))
            except TrainingAborted:
                self._write_metrics()
                self._write_manifest("aborted")
                raise

            row = {
                "epoch": epoch,
                "lr": self.optimizer.lr,
                "loss": float(np.mean([s.total for s in steps])),
                "main_loss": float(np.mean([s.main for s in steps])),
                "aux_loss": float(np.mean([s.aux for s in steps])),
                "val_dsc": math.nan,
            }
            last = epoch == epochs - 1
            if self.val_samples and ((epoch + 1) % self.cfg.eval_every == 0 or last):
                row["val_dsc"] = self.validate()
            self.history.append(row)
            _LOGGER.info(
                "Epoch %d/%d: lr %.3g loss %.4f (main %.4f, aux %.4f) val DSC %.4f",
                epoch + 1,
                epochs,
                row["lr"],
                row["loss"],
                row["main_loss"],
                row["aux_loss"],
                row["val_dsc"],
            )
            self._write_metrics()
            if (epoch + 1) % self.cfg.checkpoint_every == 0 or last:
                self._checkpoint(epoch)
        self._write_manifest("finished")
        return pd.DataFrame(self.history)


def train(
    model: MedFormer,
    train_samples: Sequence[SegSample],
    val_samples: Sequence[SegSample] | None,
    cfg: RunConfig,
    out_dir: str | Path | None = None,
) -> pd.DataFrame:
    """Train ``model`` in place and return the per-epoch history."""
    return Trainer(model, train_samples, val_samples, cfg, out_dir).run()
