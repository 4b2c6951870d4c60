"""
Differentiable primitives.

Every function takes and returns ``Tensor`` objects and registers a backward
closure on the tape. Binary elementwise operations accept either two tensors of
identical shape or a tensor and a Python scalar; there is no other
broadcasting. Per-channel affine terms live inside ``conv2d`` and
``normalize``.
"""

from __future__ import annotations

import builtins
import math
from typing import TYPE_CHECKING

import numpy as np

from .const import CE_LOG_CLAMP, GELU_COEFF, NORM_CHANNELS_PER_GROUP, NORM_EPS
from .errors import ShapeError
from .profiling import record_macs
from .tensor import Tensor, as_tensor

if TYPE_CHECKING:
    from collections.abc import Sequence

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _scalar_or_tensor(
    a: Tensor | float, b: Tensor | float, op: str
) -> tuple[Tensor, Tensor | None, float | None]:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            msg = f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)"
            raise ShapeError(msg)
        return a, b, None
    return a, None, float(b)


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise ``a + b``."""
    a, tb, scalar = _scalar_or_tensor(a, b, "add")
    if tb is None:
        return Tensor.from_op(a.data + scalar, (a,), "add", lambda g: (g,))
    return Tensor.from_op(a.data + tb.data, (a, tb), "add", lambda g: (g, g))


def sub(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise ``a - b``."""
    a, tb, scalar = _scalar_or_tensor(a, b, "sub")
    if tb is None:
        return Tensor.from_op(a.data - scalar, (a,), "sub", lambda g: (g,))
    return Tensor.from_op(a.data - tb.data, (a, tb), "sub", lambda g: (g, -g))


def mul(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise ``a * b``."""
    a, tb, scalar = _scalar_or_tensor(a, b, "mul")
    if tb is None:
        return Tensor.from_op(a.data * scalar, (a,), "mul", lambda g: (g * scalar,))
    a_data, b_data = a.data, tb.data
    return Tensor.from_op(
        a_data * b_data, (a, tb), "mul", lambda g: (g * b_data, g * a_data)
    )


def div(a: Tensor | float, b: Tensor | float) -> Tensor:
    """Elementwise ``a / b``."""
    a, tb, scalar = _scalar_or_tensor(a, b, "div")
    if tb is None:
        return Tensor.from_op(a.data / scalar, (a,), "div", lambda g: (g / scalar,))
    a_data, b_data = a.data, tb.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g / b_data, -g * a_data / (b_data * b_data)

    return Tensor.from_op(a_data / b_data, (a, tb), "div", backward)


def neg(x: Tensor) -> Tensor:
    """Elementwise negation."""
    return Tensor.from_op(-x.data, (x,), "neg", lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Row-major matrix product over the last two axes.

    Leading (batch) axes must be identical. Gradients follow
    ``dA = dC·Bᵀ`` and ``dB = Aᵀ·dC``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.shape[:-2] != b.shape[:-2]
        or a.shape[-1] != b.shape[-2]
    ):
        msg = f"matmul: incompatible shapes {a.shape} and {b.shape}"
        raise ShapeError(msg)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    record_macs("matmul", math.prod(a.shape[:-2]) * m * k * n)
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.matmul(g, np.swapaxes(b_data, -1, -2)),
            np.matmul(np.swapaxes(a_data, -1, -2), g),
        )

    return Tensor.from_op(np.matmul(a_data, b_data), (a, b), "matmul", backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute axes."""
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        msg = f"transpose: {axes} is not a permutation of {x.ndim} axes"
        raise ShapeError(msg)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.transpose(x.data, axes),
        (x,),
        "transpose",
        lambda g: (np.transpose(g, inverse),),
    )


def swap_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape without changing the row-major element order."""
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = math.prod(s for s in shape if s != -1)
        if known == 0 or x.size % known:
            msg = f"reshape: cannot view {x.shape} as {shape}"
            raise ShapeError(msg)
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != x.size:
        msg = f"reshape: cannot view {x.shape} as {shape}"
        raise ShapeError(msg)
    source = x.shape
    return Tensor.from_op(
        x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(source),)
    )


def flatten(x: Tensor, start: int = 2) -> Tensor:
    """Merge every axis from ``start`` on into one."""
    return reshape(x, (*x.shape[:start], -1))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; other extents must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        msg = "concat: nothing to concatenate"
        raise ShapeError(msg)
    axis = axis % tensors[0].ndim
    reference = tensors[0].shape
    for position, t in enumerate(tensors):
        if t.ndim != len(reference) or any(
            t.shape[i] != reference[i] for i in range(t.ndim) if i != axis
        ):
            msg = f"concat: tensor {position} has shape {t.shape}, expected {reference} off axis {axis}"
            raise ShapeError(msg)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, bounds, axis=axis)

    return Tensor.from_op(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        "concat",
        backward,
    )


def _slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(x.shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return Tensor.from_op(x.data[key], (x,), "slice", backward)


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Split along ``axis`` into consecutive parts of the given extents."""
    axis = axis % x.ndim
    if builtins.sum(sizes) != x.shape[axis]:
        msg = f"split: sizes {list(sizes)} do not cover extent {x.shape[axis]}"
        raise ShapeError(msg)
    parts, start = [], 0
    for size in sizes:
        parts.append(_slice(x, axis, start, start + size))
        start += size
    return parts


def chunk(x: Tensor, count: int, axis: int) -> list[Tensor]:
    """Split along ``axis`` into ``count`` equal parts."""
    extent = x.shape[axis]
    if extent % count:
        msg = f"chunk: extent {extent} is not divisible by {count}"
        raise ShapeError(msg)
    return split(x, [extent // count] * count, axis)


def _normalize_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(  # noqa: A001
    x: Tensor, axis: int | tuple[int, ...] | None = None, *, keepdims: bool = False
) -> Tensor:
    """Sum over ``axis`` (all axes when None)."""
    axes = _normalize_axes(axis, x.ndim)
    source = x.shape

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, source),)

    return Tensor.from_op(
        np.sum(x.data, axis=axes, keepdims=keepdims), (x,), "sum", backward
    )


def mean(
    x: Tensor, axis: int | tuple[int, ...] | None = None, *, keepdims: bool = False
) -> Tensor:
    """Mean over ``axis`` (all axes when None)."""
    axes = _normalize_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axes, keepdims=keepdims), 1.0 / count)


def exp(x: Tensor) -> Tensor:
    """Elementwise exponential."""
    y = np.exp(x.data)
    return Tensor.from_op(y, (x,), "exp", lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    """Elementwise natural logarithm."""
    x_data = x.data
    return Tensor.from_op(np.log(x_data), (x,), "log", lambda g: (g / x_data,))


def clamp_min(x: Tensor, low: float = CE_LOG_CLAMP) -> Tensor:
    """Elementwise ``max(x, low)``; no gradient flows where the clamp is active."""
    mask = x.data > low
    return Tensor.from_op(
        np.maximum(x.data, low), (x,), "clamp_min", lambda g: (g * mask,)
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilised by subtracting the maximum."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), "softmax", backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation ``0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))``."""
    x_data = x.data
    inner = _SQRT_2_OVER_PI * (x_data + GELU_COEFF * x_data**3)
    t = np.tanh(inner)
    y = 0.5 * x_data * (1.0 + t)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x_data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x_data * (1.0 - t * t) * d_inner),)

    return Tensor.from_op(y, (x,), "gelu", backward)


def pad2d(x: Tensor, pad: int, mode: str = "zeros") -> Tensor:
    """Pad the last two axes by ``pad`` on every side with zeros or circularly."""
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    if mode == "zeros":
        widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]

        def backward_zeros(g: np.ndarray) -> tuple[np.ndarray]:
            return (g[..., pad : pad + h, pad : pad + w],)

        return Tensor.from_op(np.pad(x.data, widths), (x,), "pad", backward_zeros)

    if mode == "circular":
        if pad > min(h, w):
            msg = f"pad2d: circular pad {pad} exceeds extent {(h, w)}"
            raise ShapeError(msg)
        rows = np.arange(-pad, h + pad) % h
        cols = np.arange(-pad, w + pad) % w

        def backward_circular(g: np.ndarray) -> tuple[np.ndarray]:
            partial = np.zeros((*g.shape[:-2], h, g.shape[-1]), dtype=g.dtype)
            np.add.at(partial, (..., rows, slice(None)), g)
            full = np.zeros((*g.shape[:-2], h, w), dtype=g.dtype)
            np.add.at(full, (..., cols), partial)
            return (full,)

        data = np.take(np.take(x.data, rows, axis=-2), cols, axis=-1)
        return Tensor.from_op(data, (x,), "pad", backward_circular)

    msg = f"pad2d: unknown padding mode '{mode}'"
    raise ShapeError(msg)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Return a strided ``n×c×ho×wo×kh×kw`` view of every kernel placement."""
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def conv2d(  # noqa: PLR0913
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
    padding_mode: str = "zeros",
) -> Tensor:
    """
    2D cross-correlation of ``x: N×C_in×H×W`` with ``weight: C_out×(C_in/groups)×k×k``.

    ``groups == C_in`` gives a depthwise convolution, a 1×1 kernel a
    pointwise one. The output extent ``(H + 2·pad − k)/stride + 1`` must be
    integral.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        msg = f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}"
        raise ShapeError(msg)
    n, c_in, h, w = x.shape
    c_out, c_group, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups or c_group != c_in // groups:
        msg = f"conv2d: {c_in} input channels, weight {weight.shape} and groups={groups} disagree"
        raise ShapeError(msg)
    if bias is not None and bias.shape != (c_out,):
        msg = f"conv2d: bias shape {bias.shape} does not match {c_out} output channels"
        raise ShapeError(msg)
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        msg = (
            f"conv2d: output extent of ({h}+2*{padding}-{kh})/{stride}+1 by "
            f"({w}+2*{padding}-{kw})/{stride}+1 is not integral"
        )
        raise ShapeError(msg)
    ho, wo = span_h // stride + 1, span_w // stride + 1
    record_macs("conv", n * c_out * ho * wo * c_group * kh * kw)

    xp = pad2d(x, padding, padding_mode)
    win = _windows(xp.data, kh, kw, stride)
    w_data = weight.data
    if groups == 1:
        out = np.tensordot(win, w_data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        win_g = win.reshape(n, groups, c_group, ho, wo, kh, kw)
        w_g = w_data.reshape(groups, c_out // groups, c_group, kh, kw)
        out = np.einsum("ngcyxij,gocij->ngoyx", win_g, w_g, optimize=True).reshape(
            n, c_out, ho, wo
        )
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        if groups == 1:
            grad_w = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            cols = np.tensordot(g, w_data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        else:
            g_g = g.reshape(n, groups, c_out // groups, ho, wo)
            grad_w = np.einsum("ngoyx,ngcyxij->gocij", g_g, win_g, optimize=True).reshape(
                w_data.shape
            )
            cols = np.einsum("ngoyx,gocij->ngcyxij", g_g, w_g, optimize=True).reshape(
                n, c_in, ho, wo, kh, kw
            )
        grad_xp = np.zeros(xp.shape, dtype=g.dtype)
        row_end, col_end = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i : i + row_end : stride, j : j + col_end : stride] += cols[
                    ..., i, j
                ]
        if bias is None:
            return grad_xp, grad_w
        return grad_xp, grad_w, g.sum(axis=(0, 2, 3))

    parents = (xp, weight) if bias is None else (xp, weight, bias)
    return Tensor.from_op(out, parents, "conv2d", backward)


def norm_groups(channels: int) -> int:
    """
    Group count for group normalization.

    Eight channels per group, a single group below eight channels; when the
    width is not a multiple of eight the count is lowered until it divides.
    """
    groups = max(1, channels // NORM_CHANNELS_PER_GROUP)
    while channels % groups:
        groups -= 1
    return groups


def normalize(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    groups: int | None = None,
    eps: float = NORM_EPS,
) -> Tensor:
    """Per-sample group normalization of ``x: N×d×...`` followed by a per-channel affine map."""
    n, d = x.shape[:2]
    if gamma.shape != (d,) or beta.shape != (d,):
        msg = f"normalize: affine shapes {gamma.shape}/{beta.shape} do not match {d} channels"
        raise ShapeError(msg)
    groups = groups or norm_groups(d)
    if d % groups:
        msg = f"normalize: {d} channels cannot form {groups} groups"
        raise ShapeError(msg)
    affine_shape = (1, d) + (1,) * (x.ndim - 2)
    reduce_axes = (0, *range(2, x.ndim))

    grouped = x.data.reshape(n, groups, -1)
    mu = grouped.mean(axis=-1, keepdims=True)
    var = grouped.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = ((grouped - mu) * inv_std).reshape(x.shape)
    gamma_b = gamma.data.reshape(affine_shape)
    out = x_hat * gamma_b + beta.data.reshape(affine_shape)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_gamma = (g * x_hat).sum(axis=reduce_axes)
        grad_beta = g.sum(axis=reduce_axes)
        d_hat = (g * gamma_b).reshape(n, groups, -1)
        hat = x_hat.reshape(n, groups, -1)
        count = hat.shape[-1]
        grad_x = (inv_std / count) * (
            count * d_hat
            - d_hat.sum(axis=-1, keepdims=True)
            - hat * (d_hat * hat).sum(axis=-1, keepdims=True)
        )
        return grad_x.reshape(x.shape), grad_gamma, grad_beta

    return Tensor.from_op(out, (x, gamma, beta), "normalize", backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize every position of ``x: N×d×H×W`` across its ``d`` channels."""
    n, d, h, w = x.shape
    rows = reshape(transpose(x, (0, 2, 3, 1)), (n * h * w, d))
    normed = normalize(rows, gamma, beta, groups=1, eps=eps)
    return transpose(reshape(normed, (n, h, w, d)), (0, 3, 1, 2))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour ×2 upsampling of the last two axes."""
    n, c, h, w = x.shape
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return Tensor.from_op(
        data,
        (x,),
        "upsample2x",
        lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),),
    )


def avg_pool2d(x: Tensor, factor_h: int, factor_w: int) -> Tensor:
    """Area-average non-overlapping ``factor_h×factor_w`` blocks."""
    n, c, h, w = x.shape
    if h % factor_h or w % factor_w:
        msg = f"avg_pool2d: {(h, w)} is not divisible by {(factor_h, factor_w)}"
        raise ShapeError(msg)
    blocks = reshape(x, (n, c, h // factor_h, factor_h, w // factor_w, factor_w))
    return mean(blocks, (3, 5))
