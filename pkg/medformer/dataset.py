"""
Dataset directories and batch loading.

A dataset directory holds ``manifest.json`` (``{"cases": [{"id", "spacing",
"split"}, ...]}``) and one image and one label MFT file per case under
``cases/``.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .config import AugmentConfig, validate_manifest
from .const import CASES_DIR, IMAGE_SUFFIX, LABEL_SUFFIX, MANIFEST_NAME
from .data import SegSample
from .errors import DataError, FormatError
from .mft import read_mft, write_mft
from .preprocessing import augment

if TYPE_CHECKING:
    from collections.abc import Iterator, Mapping, Sequence

_LOGGER = logging.getLogger(__name__)


def write_dataset(
    root: str | Path, splits: Mapping[str, Sequence[SegSample]], num_classes: int | None = None
) -> Path:
    """Write every sample of every split under ``root`` and index them in the manifest."""
    root = Path(root)
    (root / CASES_DIR).mkdir(parents=True, exist_ok=True)
    cases = []
    for split, samples in splits.items():
        for sample in samples:
            write_mft(root / CASES_DIR / f"{sample.case_id}{IMAGE_SUFFIX}", sample.image)
            write_mft(root / CASES_DIR / f"{sample.case_id}{LABEL_SUFFIX}", sample.label)
            cases.append({"id": sample.case_id, "spacing": list(sample.spacing), "split": split})
    manifest: dict = {"cases": cases}
    if num_classes is not None:
        manifest["num_classes"] = num_classes
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    _LOGGER.info("Wrote %d cases to %s", len(cases), root)
    return root


def read_manifest(root: str | Path) -> dict:
    """Load and validate the manifest of ``root``."""
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        msg = f"No dataset manifest at {path}"
        raise DataError(msg)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        msg = f"Manifest {path} is not valid JSON: {err}"
        raise DataError(msg) from err
    return validate_manifest(data)


def load_dataset(root: str | Path, split: str | None = None) -> list[SegSample]:
    """Read the cases of ``split`` (every case when ``None``)."""
    root = Path(root)
    manifest = read_manifest(root)
    samples = []
    for case in manifest["cases"]:
        if split is not None and case["split"] != split:
            continue
        image_path = root / CASES_DIR / f"{case['id']}{IMAGE_SUFFIX}"
        label_path = root / CASES_DIR / f"{case['id']}{LABEL_SUFFIX}"
        try:
            image, label = read_mft(image_path), read_mft(label_path)
        except FileNotFoundError as err:
            msg = f"Case '{case['id']}' is listed in the manifest but {err.filename} is missing"
            raise DataError(msg) from err
        except FormatError as err:
            msg = f"Case '{case['id']}': {err}"
            raise DataError(msg) from err
        samples.append(
            SegSample(
                image=image.astype(np.float32, copy=False),
                label=label.astype(np.uint8, copy=False),
                spacing=tuple(case["spacing"]),
                case_id=case["id"],
            )
        )
    if not samples:
        where = f"split '{split}' of " if split else ""
        msg = f"No cases in {where}{root}"
        raise DataError(msg)
    _LOGGER.debug("Loaded %d cases from %s", len(samples), root)
    return samples


def item_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Generator for one sample of one epoch, independent of worker scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


class BatchLoader:
    """
    Shuffled, augmented mini-batches prepared on a thread pool.

    Every sample draws from its own generator seeded by ``(seed, epoch,
    index)`` and batches are yielded in order, so the stream does not depend
    on the number of workers. At most ``prefetch`` batches wait ahead of the
    consumer.
    """

    def __init__(  # noqa: PLR0913
        self,
        samples: Sequence[SegSample],
        batch_size: int,
        *,
        seed: int = 0,
        augment_cfg: AugmentConfig | None = None,
        workers: int = 1,
        shuffle: bool = True,
        prefetch: int = 2,
    ) -> None:
        """Store the sample list and loading policy."""
        if not samples:
            msg = "BatchLoader needs at least one sample"
            raise DataError(msg)
        self.samples = list(samples)
        self.batch_size = batch_size
        self.seed = seed
        self.augment_cfg = augment_cfg
        self.workers = max(1, workers)
        self.shuffle = shuffle
        self.prefetch = max(1, prefetch)

    def __len__(self) -> int:
        """Batches per epoch."""
        return -(-len(self.samples) // self.batch_size)

    def _order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.samples))
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.samples))

    def _prepare(self, index: int, epoch: int) -> SegSample:
        sample = self.samples[index]
        if self.augment_cfg is None:
            return sample
        return augment(sample, item_rng(self.seed, epoch, index), self.augment_cfg)

    def _batch(self, indices: np.ndarray, epoch: int) -> tuple[np.ndarray, np.ndarray]:
        prepared = [self._prepare(int(i), epoch) for i in indices]
        shapes = {s.shape for s in prepared}
        if len(shapes) != 1:
            msg = f"cannot batch samples of different extents {sorted(shapes)}; set a crop size"
            raise DataError(msg)
        images = np.stack([s.image for s in prepared]).astype(np.float32)
        labels = np.stack([s.label for s in prepared])
        return images, labels

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(images N×C×H×W, labels N×H×W)`` batches of ``epoch``."""
        order = self._order(epoch)
        batches = [order[i : i + self.batch_size] for i in range(0, len(order), self.batch_size)]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            pending: deque = deque()
            for indices in batches:
                pending.append(pool.submit(self._batch, indices, epoch))
                if len(pending) > self.prefetch:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()
