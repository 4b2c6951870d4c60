"""
Complexity benchmarks.

Closed-form multiply-accumulate counts for convolution, dense MHSA, window
attention (regular plus shifted layer) and bidirectional attention, compared
with the MACs the instrumented kernels actually execute.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import pandas as pd

from .attention import (
    AttnConfig,
    BidirectionalAttention,
    MultiHeadSelfAttention,
    swin_pair_forward,
)
from .errors import ConfigError, DataError
from .nn import Conv2d, Module
from .profiling import MacCounter, count_macs
from .tensor import Tensor, no_grad

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Sequence
    from pathlib import Path

_LOGGER = logging.getLogger(__name__)

VARIANTS = ("conv", "mhsa", "window", "bmha")

DEFAULT_SWEEP: tuple[tuple[int, int], ...] = (
    (8, 8),
    (8, 16),
    (16, 16),
    (16, 32),
    (32, 32),
    (32, 64),
    (64, 64),
)


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        msg = f"Unknown variant '{variant}', expected one of {VARIANTS}"
        raise ConfigError(msg, "variant")


def formula_macs(  # noqa: PLR0913
    variant: str, h: int, w: int, d: int, k: int = 3, window: int = 4, hw: int = 16
) -> int:
    """
    Leading-term MAC count of one layer.

    conv ``k²HWd²``; mhsa ``4HWd² + 2(HW)²d``; window ``8HWd² + 4M²HWd``;
    bmha ``3HWd² + 3·hw·HW·d``.
    """
    _check_variant(variant)
    n = h * w
    if variant == "conv":
        return k * k * n * d * d
    if variant == "mhsa":
        return 4 * n * d * d + 2 * n * n * d
    if variant == "window":
        return 8 * n * d * d + 4 * window * window * n * d
    return 3 * n * d * d + 3 * hw * n * d


def formula_params(variant: str, d: int, k: int = 3) -> int:
    """Parameter count of the benchmarked layer (weights plus output biases)."""
    _check_variant(variant)
    if variant == "conv":
        return k * k * d * d + d
    if variant == "mhsa":
        return 4 * d * d + d
    if variant == "window":
        return 2 * (4 * d * d + d)
    # token and semantic projections, two output projections
    return 6 * d * d + 2 * d


@dataclass
class BenchLayer:
    """A built layer and the callable that runs it once."""

    module: Module
    run: Callable[[Tensor], Tensor]
    d: int


def build_layer(  # noqa: PLR0913
    variant: str,
    d: int,
    *,
    k: int = 3,
    window: int = 4,
    semantic_hw: tuple[int, int] = (4, 4),
    heads: int = 1,
    seed: int = 0,
) -> BenchLayer:
    """Build the layer measured for ``variant``."""
    _check_variant(variant)
    rng = np.random.default_rng(seed)
    if variant == "conv":
        conv = Conv2d(d, d, k, rng=rng)
        return BenchLayer(conv, conv, d)
    if variant == "mhsa":
        attn = MultiHeadSelfAttention(d, heads, rng=rng)
        return BenchLayer(attn, attn, d)
    if variant == "window":
        pair = Module()
        pair.regular = MultiHeadSelfAttention(d, heads, rng=rng)
        pair.shifted = MultiHeadSelfAttention(d, heads, rng=rng)
        return BenchLayer(
            pair, lambda x: swin_pair_forward(x, pair.regular, pair.shifted, window), d
        )
    cfg = AttnConfig(d=d, n_heads=heads, kernel_size=1, semantic_hw=semantic_hw)
    attn = BidirectionalAttention(cfg, rng=rng)
    m = Tensor(rng.standard_normal((1, d, *semantic_hw)))
    return BenchLayer(attn, lambda x: attn(x, m)[0], d)


def count_layer_macs(layer: BenchLayer, h: int, w: int) -> tuple[MacCounter, float]:
    """Run ``layer`` once on a random ``1×d×H×W`` map; return its MACs by kind and the wall time."""
    x = Tensor(np.random.default_rng(1).standard_normal((1, layer.d, h, w)))
    started = time.perf_counter()
    with no_grad(), count_macs() as counter:
        layer.run(x)
    return counter, time.perf_counter() - started


def measured_macs(  # noqa: PLR0913
    variant: str,
    h: int,
    w: int,
    d: int,
    *,
    k: int = 3,
    window: int = 4,
    semantic_hw: tuple[int, int] = (4, 4),
    heads: int = 1,
) -> int:
    """MACs the instrumented kernels execute for one ``variant`` layer on an ``H×W`` map."""
    layer = build_layer(variant, d, k=k, window=window, semantic_hw=semantic_hw, heads=heads)
    counter, _ = count_layer_macs(layer, h, w)
    return counter.total


def measured_params(variant: str, d: int, k: int = 3) -> int:
    """Parameter count of the layer ``build_layer`` creates."""
    return build_layer(variant, d, k=k).module.parameter_count()


@dataclass(frozen=True)
class LinearityFit:
    """Least-squares fit of ``log MACs`` against ``log n``."""

    exponent: float
    r_squared: float
    n: tuple[int, ...]
    macs: tuple[int, ...]


def fit_loglog(n: Sequence[int], macs: Sequence[int]) -> LinearityFit:
    """Fit ``log macs = a·log n + b`` and report ``a`` and R²."""
    if len(n) < 3:  # noqa: PLR2004
        msg = f"a scaling fit needs at least 3 points, got {len(n)}"
        raise DataError(msg)
    x, y = np.log(np.asarray(n, dtype=np.float64)), np.log(np.asarray(macs, dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - float(np.sum(residual**2)) / total if total > 0 else 1.0
    return LinearityFit(float(slope), r_squared, tuple(int(v) for v in n), tuple(int(v) for v in macs))


def linearity_fit(
    variant: str,
    d: int,
    sweep: Sequence[tuple[int, int]] = DEFAULT_SWEEP,
    **layer_kwargs: int,
) -> LinearityFit:
    """Measure MACs over ``sweep`` and fit the scaling exponent in ``n = H·W``."""
    if len(sweep) < 3:  # noqa: PLR2004
        msg = f"a scaling fit needs at least 3 sweep points, got {len(sweep)}"
        raise DataError(msg)
    n = [h * w for h, w in sweep]
    macs = [measured_macs(variant, h, w, d, **layer_kwargs) for h, w in sweep]
    fit = fit_loglog(n, macs)
    _LOGGER.info("%s: MACs ~ n^%.3f (R² %.5f)", variant, fit.exponent, fit.r_squared)
    return fit


def sweep_shapes(start: tuple[int, int] = (8, 8), doublings: int = 6) -> list[tuple[int, int]]:
    """Shapes whose token count doubles at every step, alternating the grown axis."""
    shapes = [start]
    h, w = start
    for step in range(doublings):
        if step % 2 == 0:
            w *= 2
        else:
            h *= 2
        shapes.append((h, w))
    return shapes


def report(configs: Iterable[dict]) -> pd.DataFrame:
    """
    Benchmark every config (``variant, h, w, d`` plus optional ``k``, ``window``, ``hw``).

    Rows are sorted by variant, token count and width; ``extra_macs`` holds
    what the instrumented path executes beyond the leading terms.
    """
    rows = []
    for config in configs:
        variant, h, w, d = config["variant"], config["h"], config["w"], config["d"]
        k, window = config.get("k", 3), config.get("window", 4)
        semantic_hw = tuple(config.get("semantic_hw", (4, 4)))
        layer = build_layer(variant, d, k=k, window=window, semantic_hw=semantic_hw)
        counter, elapsed = count_layer_macs(layer, h, w)
        formula = formula_macs(variant, h, w, d, k, window, math.prod(semantic_hw))
        rows.append(
            {
                "variant": variant,
                "h": h,
                "w": w,
                "d": d,
                "n": h * w,
                "params": layer.module.parameter_count(),
                "formula_params": formula_params(variant, d, k),
                "formula_macs": formula,
                "measured_macs": counter.total,
                "extra_macs": counter.total - formula,
                "ratio": counter.total / formula,
                "wall_time_s": elapsed,
            }
        )
    if not rows:
        msg = "nothing to benchmark"
        raise DataError(msg)
    return pd.DataFrame(rows).sort_values(["variant", "n", "d"], kind="stable").reset_index(drop=True)


def write_report(table: pd.DataFrame, csv_path: str | Path) -> str:
    """Write ``table`` as CSV and return its human-readable rendering."""
    table.to_csv(csv_path, index=False)
    return table.to_string(index=False)
