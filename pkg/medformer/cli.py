"""Command-line entry point: ``medformer <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from . import __version__
from .bench import VARIANTS, report, sweep_shapes, write_report
from .checkpoint import restore
from .config import RunConfig, load_run_config
from .const import EXIT_FAILURE, EXIT_OK, EXIT_USAGE
from .dataset import load_dataset, read_manifest, write_dataset
from .errors import DataError, MedFormerError
from .inference import sliding_window_infer
from .metrics import summarize
from .mft import read_mft, write_mft
from .model import build
from .semantic_map import token_cosine_similarity
from .synthetic import synth_task
from .tensor import Tensor, no_grad
from .trainer import evaluate, train

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .data import ForwardOutput
    from .model import MedFormer

_LOGGER = logging.getLogger(__name__)

REPORT_NAME = "report.csv"
SUMMARY_NAME = "summary.csv"
PGM_MAX = 255


def _shape(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        values = tuple(int(p) for p in parts)
    except ValueError as err:
        msg = f"expected H,W or HxW, got '{text}'"
        raise argparse.ArgumentTypeError(msg) from err
    if len(values) == 1:
        values = values * 2
    if len(values) != 2 or min(values) < 1:  # noqa: PLR2004
        msg = f"expected two positive extents, got '{text}'"
        raise argparse.ArgumentTypeError(msg)
    return values


def _load_image(path: str | Path) -> np.ndarray:
    """Read an MFT image as ``C×H×W`` float32."""
    image = read_mft(path)
    if image.ndim == 2:  # noqa: PLR2004
        image = image[None]
    if image.ndim != 3:  # noqa: PLR2004
        msg = f"{path}: expected an H×W or C×H×W image, got shape {image.shape}"
        raise DataError(msg)
    return image.astype(np.float32, copy=False)


def _splits(root: Path) -> set[str]:
    return {case["split"] for case in read_manifest(root)["cases"]}


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Write ``values: H×W`` as a plain (P2) PGM scaled to 0..255 by its maximum."""
    values = np.asarray(values, dtype=np.float64)
    peak = float(values.max())
    pixels = np.rint(values / peak * PGM_MAX) if peak > 0 else np.zeros_like(values)
    height, width = values.shape
    lines = ["P2", f"{width} {height}", str(PGM_MAX)]
    lines.extend(" ".join(str(int(v)) for v in row) for row in pixels)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a plain (P2) PGM written by ``write_pgm``."""
    tokens = [
        token
        for line in Path(path).read_text(encoding="ascii").splitlines()
        for token in line.split("#", 1)[0].split()
    ]
    if not tokens or tokens[0] != "P2":
        msg = f"{path} is not a plain PGM file"
        raise DataError(msg)
    width, height = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:], dtype=np.int64).reshape(height, width)


def cmd_train(args: argparse.Namespace) -> int:
    """Train a model on the ``train`` split, validating on ``val`` when present."""
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    data = Path(args.data)
    splits = _splits(data)
    train_samples = load_dataset(data, "train")
    val_samples = load_dataset(data, "val") if "val" in splits else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build(cfg.model, seed=cfg.seed)
    _LOGGER.info(
        "Training %d-parameter model on %d cases for %d epochs",
        model.parameter_count(),
        len(train_samples),
        cfg.epochs,
    )
    history = train(model, train_samples, val_samples, cfg, out)
    if len(history):
        _LOGGER.info("Final training loss %.4f", history["loss"].iloc[-1])
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """Score a checkpoint on a dataset split and write the per-case report and summary."""
    model, _ = restore(args.checkpoint)
    samples = load_dataset(args.data, args.split)
    table = evaluate(model, samples, args.window)
    summary = summarize(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / REPORT_NAME, index=False)
    summary.to_csv(out / SUMMARY_NAME, index=False)
    for row in summary.itertuples(index=False):
        _LOGGER.info("Class %s: DSC %.4f, HD95 %.3f", row[0], row.dsc, row.hd95)
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    """Predict one MFT image and write its label map."""
    model, _ = restore(args.checkpoint)
    image = _load_image(args.image)
    window = args.window or image.shape[1:]
    probs = sliding_window_infer(model.predict_logits, image, window)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mft(out, probs.argmax(axis=0).astype(np.uint8))
    _LOGGER.info("Wrote label map %s to %s", probs.shape[1:], out)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    """Count MACs over a doubling sweep of token-map sizes."""
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    shapes = sweep_shapes(args.start, args.sweep)
    configs = [
        {"variant": variant, "h": h, "w": w, "d": args.d, "k": args.kernel, "window": args.window}
        for variant in variants
        for h, w in shapes
    ]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    print(write_report(report(configs), out))  # noqa: T201
    return EXIT_OK


def _forward_case(model: MedFormer, image: np.ndarray) -> tuple[ForwardOutput, list]:
    model.capture_attention(enabled=True)
    try:
        with no_grad():
            output = model(Tensor(image[None], dtype=model.stem_in.weight.dtype))
        return output, model.semantic_attention()
    finally:
        model.capture_attention(enabled=False)


def cmd_inspect_attn(args: argparse.Namespace) -> int:
    """Export one semantic token's attention over the full token map of a level."""
    model, _ = restore(args.checkpoint)
    if model.cfg.attention != "bmha":
        msg = "attention export needs a bidirectional-attention model"
        raise DataError(msg)
    output, captured = _forward_case(model, _load_image(args.case))
    weights = captured[args.level]
    tokens = weights.shape[1]
    if not 0 <= args.token < tokens:
        msg = f"token {args.token} out of range for {tokens} semantic tokens"
        raise DataError(msg)
    hw = output.encoder_maps[args.level].shape[2:]
    attention = weights[0, args.token].reshape(hw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"attn_level{args.level}_token{args.token}"
    write_mft(out / f"{stem}.mft", attention)
    write_pgm(out / f"{stem}.pgm", attention)
    _LOGGER.info("Attention of token %d over %s sums to %.6f", args.token, hw, attention.sum())
    return EXIT_OK


def cmd_inspect_cosine(args: argparse.Namespace) -> int:
    """Export the absolute cosine similarity of a level's final semantic tokens."""
    model, _ = restore(args.checkpoint)
    if model.cfg.attention != "bmha":
        msg = "semantic maps exist only in bidirectional-attention models"
        raise DataError(msg)
    output, _ = _forward_case(model, _load_image(args.case))
    matrix = token_cosine_similarity(output.semantic_maps[args.level])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"cosine_level{args.level}.csv"
    pd.DataFrame(matrix).to_csv(path, index=False, header=False)
    _LOGGER.info("Wrote %d×%d cosine matrix to %s", *matrix.shape, path)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    """Write a seeded synthetic dataset."""
    rng = np.random.default_rng(args.seed)
    height, width = args.size
    train_samples = synth_task(rng, args.train, height, width, args.classes)
    splits = {"train": train_samples}
    if args.val:
        val_samples = synth_task(rng, args.val, height, width, args.classes)
        splits["val"] = [
            dataclasses.replace(sample, case_id=f"val_{index:04d}")
            for index, sample in enumerate(val_samples)
        ]
    write_dataset(args.out, splits, num_classes=args.classes)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    """Create the argument parser for every subcommand."""
    parser = argparse.ArgumentParser(
        prog="medformer", description="Desk-scale MedFormer segmentation toolkit."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log debug messages"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("train", help="train a model")
    sub.add_argument("--config", help="key = value run file (defaults when omitted)")
    sub.add_argument("--data", required=True, help="dataset directory")
    sub.add_argument("--out", required=True, help="run directory")
    sub.add_argument("--seed", type=int, help="override the configured seed")
    sub.set_defaults(handler=cmd_train)

    sub = commands.add_parser("eval", help="evaluate a checkpoint on a dataset")
    sub.add_argument("--checkpoint", required=True, help="checkpoint file")
    sub.add_argument("--data", required=True, help="dataset directory")
    sub.add_argument("--split", default=None, help="split to evaluate (all cases when omitted)")
    sub.add_argument("--window", type=_shape, help="sliding window H,W (whole image when omitted)")
    sub.add_argument("--out", required=True, help="output directory for report.csv and summary.csv")
    sub.set_defaults(handler=cmd_eval)

    sub = commands.add_parser("infer", help="predict the label map of one MFT image")
    sub.add_argument("--checkpoint", required=True, help="checkpoint file")
    sub.add_argument("--image", required=True, help="H×W or C×H×W MFT image")
    sub.add_argument("--window", type=_shape, help="sliding window H,W (whole image when omitted)")
    sub.add_argument("--out", required=True, help="output MFT label map")
    sub.set_defaults(handler=cmd_infer)

    sub = commands.add_parser("bench", help="count attention MACs over a size sweep")
    sub.add_argument("--variant", choices=(*VARIANTS, "all"), default="all", help="layer kind")
    sub.add_argument("--sweep", type=int, default=6, help="number of token-count doublings")
    sub.add_argument("--start", type=_shape, default=(8, 8), help="first H,W of the sweep")
    sub.add_argument("-d", type=int, default=8, help="token width")
    sub.add_argument("--kernel", type=int, default=3, help="convolution kernel size")
    sub.add_argument("--window", type=int, default=4, help="attention window size M")
    sub.add_argument("--out", required=True, help="CSV report path")
    sub.set_defaults(handler=cmd_bench)

    for name, handler, help_text in (
        ("inspect-attn", cmd_inspect_attn, "export one semantic token's attention map"),
        ("inspect-cosine", cmd_inspect_cosine, "export semantic-token cosine similarities"),
    ):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--checkpoint", required=True, help="checkpoint file")
        sub.add_argument("--case", required=True, help="MFT image to run")
        sub.add_argument("--level", type=int, choices=(0, 1, 2), default=2, help="encoder level")
        if name == "inspect-attn":
            sub.add_argument("--token", type=int, default=0, help="semantic token index")
        sub.add_argument("--out", required=True, help="output directory")
        sub.set_defaults(handler=handler)

    sub = commands.add_parser("synth", help="write a seeded synthetic dataset")
    sub.add_argument("--out", required=True, help="dataset directory")
    sub.add_argument("--seed", type=int, default=0, help="generator seed")
    sub.add_argument("--train", type=int, default=256, help="training cases")
    sub.add_argument("--val", type=int, default=64, help="validation cases")
    sub.add_argument("--size", type=_shape, default=(64, 64), help="image H,W")
    sub.add_argument("--classes", type=int, default=2, help="classes including background")
    sub.set_defaults(handler=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (MedFormerError, OSError) as err:
        _LOGGER.error("%s failed: %s", args.command, err)  # noqa: TRY400
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
