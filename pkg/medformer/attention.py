"""
Attention layers.

Token maps are ``N×d×H×W`` tensors; attention flattens the spatial axes into
a sequence of ``n = H·W`` tokens and splits the channels contiguously into
heads of ``d / heads`` channels. Four variants live here: dense multi-head
self-attention, low-rank efficient attention, window attention (forward
only) and bidirectional multi-head attention between a token map and its
semantic map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import ops
from .const import DEFAULT_KERNEL_SIZE, DEFAULT_SEMANTIC_HW, REDUCTION_MODES
from .errors import ConfigError, ShapeError
from .nn import Conv2d, ConvFFN, ConvProjection, GroupNorm, Module
from .tensor import Tensor, no_grad

if TYPE_CHECKING:
    from .data import SemanticMap, TokenMap

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttnConfig:
    """Shape of one attention layer."""

    d: int
    n_heads: int
    kernel_size: int = DEFAULT_KERNEL_SIZE
    semantic_hw: tuple[int, int] = DEFAULT_SEMANTIC_HW
    share_qk: bool = True

    def __post_init__(self) -> None:
        """Reject impossible layouts."""
        if self.d < 1 or self.n_heads < 1 or self.d % self.n_heads:
            msg = f"d={self.d} is not divisible by n_heads={self.n_heads}"
            raise ConfigError(msg, "n_heads")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            msg = f"kernel_size must be odd and positive, got {self.kernel_size}"
            raise ConfigError(msg, "kernel_size")
        if len(self.semantic_hw) != 2 or min(self.semantic_hw) < 1:
            msg = f"semantic_hw must be two positive extents, got {self.semantic_hw}"
            raise ConfigError(msg, "semantic_hw")

    @property
    def head_dim(self) -> int:
        """Channels per head."""
        return self.d // self.n_heads

    @property
    def semantic_tokens(self) -> int:
        """Number of semantic tokens ``h·w``."""
        return self.semantic_hw[0] * self.semantic_hw[1]


def to_heads(x: Tensor, n_heads: int) -> Tensor:
    """Turn ``N×d×H×W`` into the per-head sequence ``N×heads×(H·W)×(d/heads)``."""
    n, d, h, w = x.shape
    if d % n_heads:
        msg = f"{d} channels cannot be split into {n_heads} heads"
        raise ShapeError(msg)
    seq = ops.reshape(x, (n, n_heads, d // n_heads, h * w))
    return ops.swap_last(seq)


def from_heads(seq: Tensor, hw: tuple[int, int]) -> Tensor:
    """Inverse of ``to_heads``: ``N×heads×(h·w)×d_h`` back to ``N×d×h×w``."""
    n, heads, length, head_dim = seq.shape
    if length != hw[0] * hw[1]:
        msg = f"sequence of {length} tokens cannot fill a {hw} map"
        raise ShapeError(msg)
    return ops.reshape(ops.swap_last(seq), (n, heads * head_dim, *hw))


def to_sequence(x: Tensor) -> Tensor:
    """Flatten ``N×d×H×W`` into the token sequence ``N×(H·W)×d``."""
    return ops.swap_last(ops.flatten(x, 2))


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor
) -> tuple[Tensor, Tensor]:
    """Return ``softmax(q·kᵀ/√d_h)·v`` and the attention weights."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = ops.softmax(ops.matmul(q, ops.swap_last(k)) * scale, axis=-1)
    return ops.matmul(weights, v), weights


class MultiHeadSelfAttention(Module):
    """Dense multi-head self-attention with pointwise projections."""

    def __init__(self, d: int, n_heads: int, *, rng: np.random.Generator) -> None:
        """Create the query, key, value and output projections."""
        super().__init__()
        if d % n_heads:
            msg = f"d={d} is not divisible by n_heads={n_heads}"
            raise ConfigError(msg, "n_heads")
        self.n_heads = n_heads
        self.query = Conv2d(d, d, 1, rng=rng, bias=False)
        self.key = Conv2d(d, d, 1, rng=rng, bias=False)
        self.value = Conv2d(d, d, 1, rng=rng, bias=False)
        self.out = Conv2d(d, d, 1, rng=rng)

    def forward(self, x: TokenMap) -> TokenMap:
        """Attend every token of ``x`` to every other token."""
        hw = x.shape[2:]
        q = to_heads(self.query(x), self.n_heads)
        k = to_heads(self.key(x), self.n_heads)
        v = to_heads(self.value(x), self.n_heads)
        attended, _ = scaled_dot_product_attention(q, k, v)
        return self.out(from_heads(attended, hw))


def dense_mhsa(x: TokenMap, attn: MultiHeadSelfAttention) -> TokenMap:
    """Dense self-attention over all ``H·W`` tokens."""
    return attn(x)


def conv_project(x: TokenMap, projection: ConvProjection) -> Tensor:
    """Project ``x`` with a depthwise-separable convolution and flatten to ``N×n×d``."""
    return to_sequence(projection(x))


def conv_ffn(x: TokenMap, ffn: ConvFFN) -> TokenMap:
    """Depthwise conv, GELU and pointwise conv on ``x``, plus ``x``."""
    return ffn(x)


class EfficientAttention(Module):
    """
    Low-rank attention: keys and values are reduced to ``h·w`` tokens.

    ``reduction="pool"`` averages non-overlapping areas down to the semantic
    size and works for any input divisible by it. ``reduction="strided"``
    learns a depthwise convolution whose kernel equals its stride; the factor
    is fixed by ``input_hw`` at construction.
    """

    def __init__(  # noqa: PLR0913
        self,
        d: int,
        n_heads: int,
        semantic_hw: tuple[int, int],
        *,
        rng: np.random.Generator,
        reduction: str = "pool",
        input_hw: tuple[int, int] | None = None,
    ) -> None:
        """Create the projections and, for strided reduction, the reducer."""
        super().__init__()
        if reduction not in REDUCTION_MODES:
            msg = f"Unknown reduction '{reduction}', expected one of {REDUCTION_MODES}"
            raise ConfigError(msg, "reduction")
        self.n_heads = n_heads
        self.semantic_hw = tuple(semantic_hw)
        self.reduction = reduction
        self.query = Conv2d(d, d, 1, rng=rng, bias=False)
        self.key = Conv2d(d, d, 1, rng=rng, bias=False)
        self.value = Conv2d(d, d, 1, rng=rng, bias=False)
        self.out = Conv2d(d, d, 1, rng=rng)
        self.factor: int | None = None
        if reduction == "strided":
            if input_hw is None:
                msg = "strided reduction needs the input extent"
                raise ConfigError(msg, "input_hw")
            self.factor = self._factor(tuple(input_hw))
            self.reduce_key = Conv2d(
                d, d, self.factor, rng=rng, stride=self.factor, padding=0, groups=d, bias=False
            )
            self.reduce_value = Conv2d(
                d, d, self.factor, rng=rng, stride=self.factor, padding=0, groups=d, bias=False
            )
        _LOGGER.debug(
            "Low-rank attention: width %d, %d heads, keys reduced to %s by %s",
            d,
            n_heads,
            self.semantic_hw,
            reduction,
        )

    def _factor(self, hw: tuple[int, int]) -> int:
        h, w = self.semantic_hw
        if hw[0] % h or hw[1] % w or hw[0] // h != hw[1] // w:
            msg = f"token map {hw} cannot be reduced evenly to {self.semantic_hw}"
            raise ShapeError(msg)
        return hw[0] // h

    def _reduce(self, x: Tensor, reducer: Conv2d | None) -> Tensor:
        hw = x.shape[2:]
        if reducer is not None:
            if self._factor(hw) != self.factor:
                msg = f"strided reduction built for factor {self.factor}, got map {hw}"
                raise ShapeError(msg)
            return reducer(x)
        h, w = self.semantic_hw
        if hw[0] % h or hw[1] % w:
            msg = f"token map {hw} cannot be pooled to {self.semantic_hw}"
            raise ShapeError(msg)
        return ops.avg_pool2d(x, hw[0] // h, hw[1] // w)

    def forward(self, x: TokenMap) -> TokenMap:
        """Attend every token to the ``h·w`` reduced keys."""
        strided = self.reduction == "strided"
        k = self._reduce(self.key(x), self.reduce_key if strided else None)
        v = self._reduce(self.value(x), self.reduce_value if strided else None)
        q = to_heads(self.query(x), self.n_heads)
        attended, _ = scaled_dot_product_attention(
            q, to_heads(k, self.n_heads), to_heads(v, self.n_heads)
        )
        return self.out(from_heads(attended, x.shape[2:]))


def efficient_attention(x: TokenMap, attn: EfficientAttention) -> TokenMap:
    """Low-rank attention with an ``n×l`` attention matrix."""
    return attn(x)


@dataclass
class BidirectionalResult:
    """Outputs of one bidirectional attention evaluation, per head."""

    tokens: Tensor
    semantic: Tensor | None
    logits: Tensor
    token_weights: Tensor
    semantic_logits: Tensor | None
    semantic_weights: Tensor | None


def bidirectional_attention(  # noqa: PLR0913
    q: Tensor,
    v: Tensor | None,
    q_sem: Tensor,
    v_sem: Tensor,
    *,
    k: Tensor | None = None,
    k_sem: Tensor | None = None,
    semantic: bool = True,
) -> BidirectionalResult:
    """
    Cross-attention in both directions from a single logit matrix.

    All arguments are per-head sequences: token-map side ``N×heads×n×d_h``,
    semantic side ``N×heads×l×d_h``. With shared query/key projections the
    ``n×l`` logits ``Q·Q̄ᵀ/√d_h`` drive the token stream and their transpose
    drives the semantic stream. Passing ``k``/``k_sem`` switches to separate
    keys, and the semantic logits ``Q̄·Kᵀ`` are computed on their own.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    key_sem = q_sem if k_sem is None else k_sem
    logits = ops.matmul(q, ops.swap_last(key_sem)) * scale
    token_weights = ops.softmax(logits, axis=-1)
    tokens = ops.matmul(token_weights, v_sem)
    if not semantic:
        return BidirectionalResult(tokens, None, logits, token_weights, None, None)

    if k is None:
        semantic_logits = ops.swap_last(logits)
    else:
        semantic_logits = ops.matmul(q_sem, ops.swap_last(k)) * scale
    semantic_weights = ops.softmax(semantic_logits, axis=-1)
    semantic_out = ops.matmul(semantic_weights, v)
    return BidirectionalResult(
        tokens, semantic_out, logits, token_weights, semantic_logits, semantic_weights
    )


class BidirectionalAttention(Module):
    """
    Bidirectional multi-head attention between a token map and a semantic map.

    The token map is projected with depthwise-separable convolutions, the
    semantic map with pointwise convolutions only. With
    ``update_semantic=False`` the semantic stream is skipped and its
    parameters are not created.
    """

    def __init__(
        self,
        cfg: AttnConfig,
        *,
        rng: np.random.Generator,
        update_semantic: bool = True,
        padding_mode: str = "zeros",
    ) -> None:
        """Create the projections for both streams."""
        super().__init__()
        self.cfg = cfg
        self.update_semantic = update_semantic
        self.capture = False
        self.last_semantic_attention: np.ndarray | None = None
        k, d = cfg.kernel_size, cfg.d
        self.proj_qk = ConvProjection(d, k, rng=rng, padding_mode=padding_mode)
        self.proj_qk_sem = ConvProjection(d, 1, rng=rng)
        self.proj_v_sem = ConvProjection(d, 1, rng=rng)
        self.out = Conv2d(d, d, 1, rng=rng)
        if not cfg.share_qk:
            self.proj_k_sem = ConvProjection(d, 1, rng=rng)
        if update_semantic:
            self.proj_v = ConvProjection(d, k, rng=rng, padding_mode=padding_mode)
            self.out_sem = Conv2d(d, d, 1, rng=rng)
            if not cfg.share_qk:
                self.proj_k = ConvProjection(d, k, rng=rng, padding_mode=padding_mode)

    def forward(self, x: TokenMap, m: SemanticMap) -> tuple[TokenMap, SemanticMap | None]:
        """Return the attended token map and semantic map (None when not updated)."""
        if tuple(m.shape[2:]) != tuple(self.cfg.semantic_hw):
            msg = f"semantic map extent {m.shape[2:]} differs from configured {self.cfg.semantic_hw}"
            raise ShapeError(msg)
        if m.shape[:2] != x.shape[:2]:
            msg = f"token map {x.shape} and semantic map {m.shape} disagree on batch or width"
            raise ShapeError(msg)
        heads = self.cfg.n_heads
        separate = not self.cfg.share_qk
        result = bidirectional_attention(
            to_heads(self.proj_qk(x), heads),
            to_heads(self.proj_v(x), heads) if self.update_semantic else None,
            to_heads(self.proj_qk_sem(m), heads),
            to_heads(self.proj_v_sem(m), heads),
            k=to_heads(self.proj_k(x), heads) if separate and self.update_semantic else None,
            k_sem=to_heads(self.proj_k_sem(m), heads) if separate else None,
            semantic=self.update_semantic,
        )
        if self.capture and result.semantic_weights is not None:
            # head-averaged, N×l×n
            self.last_semantic_attention = result.semantic_weights.data.mean(axis=1)
        tokens = self.out(from_heads(result.tokens, x.shape[2:]))
        if result.semantic is None:
            return tokens, None
        return tokens, self.out_sem(from_heads(result.semantic, self.cfg.semantic_hw))


class BMHABlock(Module):
    """
    Pre-norm bidirectional Transformer block.

    Token stream: ``x + attn``, then ``x + ConvFFN(norm(x))``. The semantic
    stream mirrors it with a pointwise-only FFN.
    """

    def __init__(
        self,
        cfg: AttnConfig,
        *,
        rng: np.random.Generator,
        update_semantic: bool = True,
        padding_mode: str = "zeros",
    ) -> None:
        """Create norms, attention and FFNs."""
        super().__init__()
        self.update_semantic = update_semantic
        self.norm_x = GroupNorm(cfg.d)
        self.norm_m = GroupNorm(cfg.d)
        self.attn = BidirectionalAttention(
            cfg, rng=rng, update_semantic=update_semantic, padding_mode=padding_mode
        )
        self.norm_ffn_x = GroupNorm(cfg.d)
        self.ffn_x = ConvFFN(cfg.d, cfg.kernel_size, rng=rng, padding_mode=padding_mode)
        if update_semantic:
            self.norm_ffn_m = GroupNorm(cfg.d)
            self.ffn_m = ConvFFN(cfg.d, 1, rng=rng)

    def forward(self, x: TokenMap, m: SemanticMap) -> tuple[TokenMap, SemanticMap]:
        """Refine both maps; ``m`` passes through unchanged when not updated."""
        ax, am = self.attn(self.norm_x(x), self.norm_m(m))
        x = x + ax
        x = x + self.ffn_x.branch(self.norm_ffn_x(x))
        if am is not None:
            m = m + am
            m = m + self.ffn_m.branch(self.norm_ffn_m(m))
        return x, m


def bmha(x: TokenMap, m: SemanticMap, block: BMHABlock) -> tuple[TokenMap, SemanticMap]:
    """Run one bidirectional block over a token map and its semantic map."""
    return block(x, m)


class EfficientBlock(Module):
    """Pre-norm block around ``EfficientAttention`` with a convolutional FFN."""

    def __init__(  # noqa: PLR0913
        self,
        cfg: AttnConfig,
        *,
        rng: np.random.Generator,
        reduction: str = "pool",
        input_hw: tuple[int, int] | None = None,
        padding_mode: str = "zeros",
    ) -> None:
        """Create norms, attention and FFN."""
        super().__init__()
        self.norm_attn = GroupNorm(cfg.d)
        self.attn = EfficientAttention(
            cfg.d,
            cfg.n_heads,
            cfg.semantic_hw,
            rng=rng,
            reduction=reduction,
            input_hw=input_hw,
        )
        self.norm_ffn = GroupNorm(cfg.d)
        self.ffn = ConvFFN(cfg.d, cfg.kernel_size, rng=rng, padding_mode=padding_mode)

    def forward(self, x: TokenMap) -> TokenMap:
        """Refine ``x``."""
        x = x + self.attn(self.norm_attn(x))
        return x + self.ffn.branch(self.norm_ffn(x))


def _partition(data: np.ndarray, window: int) -> np.ndarray:
    n, d, h, w = data.shape
    blocks = data.reshape(n, d, h // window, window, w // window, window)
    return blocks.transpose(0, 2, 4, 1, 3, 5).reshape(-1, d, window, window)


def _merge(data: np.ndarray, shape: tuple[int, ...], window: int) -> np.ndarray:
    n, d, h, w = shape
    blocks = data.reshape(n, h // window, w // window, d, window, window)
    return blocks.transpose(0, 3, 1, 4, 2, 5).reshape(shape)


def window_mhsa_forward(
    x: TokenMap, attn: MultiHeadSelfAttention, window: int, shift: int = 0
) -> TokenMap:
    """
    Dense attention inside non-overlapping ``window×window`` windows.

    Forward only. A nonzero ``shift`` rolls the map cyclically before
    partitioning and back afterwards; no cross-window mask is applied.
    """
    n, d, h, w = x.shape
    if window < 1 or h % window or w % window:
        msg = f"token map {(h, w)} is not divisible by window {window}"
        raise ShapeError(msg)
    with no_grad():
        data = x.data
        if shift:
            data = np.roll(data, (-shift, -shift), axis=(2, 3))
        attended = attn(Tensor(_partition(data, window))).data
        data = _merge(attended, x.shape, window)
        if shift:
            data = np.roll(data, (shift, shift), axis=(2, 3))
    return Tensor(data)


def swin_pair_forward(
    x: TokenMap,
    regular: MultiHeadSelfAttention,
    shifted: MultiHeadSelfAttention,
    window: int,
) -> TokenMap:
    """Window attention followed by shifted-window attention (shift ``window // 2``)."""
    x = window_mhsa_forward(x, regular, window)
    return window_mhsa_forward(x, shifted, window, shift=window // 2)
