"""Module containers and the convolutional layers MedFormer is built from."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING, Any

import numpy as np

from . import ops
from .const import FFN_EXPANSION
from .errors import ShapeError
from .tensor import Tensor, default_dtype

if TYPE_CHECKING:
    from collections.abc import Iterable, Iterator


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data: Any, *, dtype: Any = None) -> None:
        """Wrap ``data`` as a leaf that requires grad."""
        super().__init__(
            data, requires_grad=True, dtype=default_dtype() if dtype is None else dtype
        )


class Module:
    """
    Base class of every layer.

    Attributes holding a ``Parameter`` or another ``Module`` are registered on
    assignment; ``named_parameters`` walks them in registration order and
    names each parameter by its dotted attribute path.
    """

    def __init__(self) -> None:
        """Create the empty registries."""
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name: str, value: Any) -> None:
        """Register parameters and submodules."""
        if isinstance(value, Parameter):
            self._modules.pop(name, None)
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._parameters.pop(name, None)
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        """Run ``forward``."""
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        """Compute the layer output."""
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, Module]]:
        """Yield direct submodules with their attribute names."""
        yield from self._modules.items()

    def modules(self) -> Iterator[Module]:
        """Yield this module and every submodule, depth first."""
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        """Yield ``(dotted name, parameter)`` pairs."""
        for name, param in self._parameters.items():
            yield f"{prefix}{name}", param
        for name, child in self._modules.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        """Return every parameter."""
        return [param for _, param in self.named_parameters()]

    def parameter_count(self) -> int:
        """Return the number of trainable scalars."""
        return sum(param.size for param in self.parameters())

    def zero_grad(self) -> None:
        """Forget every accumulated gradient."""
        for param in self.parameters():
            param.zero_grad()

    def astype(self, dtype: Any) -> Module:
        """Convert every parameter in place and return the module."""
        for param in self.parameters():
            param.data = param.data.astype(dtype)
            param.grad = None
        return self


class ModuleList(Module):
    """An indexable sequence of modules."""

    def __init__(self, modules: Iterable[Module] = ()) -> None:
        """Register ``modules`` under their positions."""
        super().__init__()
        self._items: list[Module] = []
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        """Add ``module`` at the end."""
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self) -> Iterator[Module]:
        """Iterate over the modules."""
        return iter(self._items)

    def __len__(self) -> int:
        """Number of modules."""
        return len(self._items)

    def __getitem__(self, index: int) -> Module:
        """Module at ``index``."""
        return self._items[index]


def lecun_normal(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int
) -> np.ndarray:
    """Draw weights from ``N(0, 1/fan_in)``."""
    return rng.standard_normal(shape) / math.sqrt(fan_in)


class Conv2d(Module):
    """2D convolution with optional bias; padding defaults to ``(k - 1) // 2``."""

    def __init__(  # noqa: PLR0913
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 1,
        *,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        groups: int = 1,
        bias: bool = True,
        padding_mode: str = "zeros",
    ) -> None:
        """Initialise LeCun-normal weights and a zero bias."""
        super().__init__()
        if in_channels % groups or out_channels % groups:
            msg = f"Conv2d: {in_channels}->{out_channels} channels cannot form {groups} groups"
            raise ShapeError(msg)
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding
        self.groups = groups
        self.padding_mode = padding_mode
        c_group = in_channels // groups
        shape = (out_channels, c_group, kernel_size, kernel_size)
        self.weight = Parameter(lecun_normal(rng, shape, c_group * kernel_size**2))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        """Convolve ``x: N×C×H×W``."""
        return ops.conv2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            groups=self.groups,
            padding_mode=self.padding_mode,
        )


class GroupNorm(Module):
    """Per-sample group normalization with eight channels per group."""

    def __init__(self, channels: int) -> None:
        """Create unit scale and zero shift."""
        super().__init__()
        self.groups = ops.norm_groups(channels)
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        """Normalize ``x: N×C×...``."""
        return ops.normalize(x, self.weight, self.bias, self.groups)


class LayerNorm(Module):
    """Normalize every token across its channels."""

    def __init__(self, channels: int) -> None:
        """Create unit scale and zero shift."""
        super().__init__()
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        """Normalize ``x: N×C×H×W`` per position."""
        return ops.layer_norm(x, self.weight, self.bias)


class ConvProjection(Module):
    """
    Depthwise-separable token projection.

    A bias-free ``k×k`` depthwise convolution followed by a bias-free
    pointwise convolution; with ``k == 1`` only the pointwise part exists.
    """

    def __init__(
        self,
        channels: int,
        kernel_size: int,
        *,
        rng: np.random.Generator,
        padding_mode: str = "zeros",
    ) -> None:
        """Create the projection convolutions."""
        super().__init__()
        self.kernel_size = kernel_size
        if kernel_size > 1:
            self.depthwise = Conv2d(
                channels,
                channels,
                kernel_size,
                rng=rng,
                groups=channels,
                bias=False,
                padding_mode=padding_mode,
            )
        self.pointwise = Conv2d(channels, channels, 1, rng=rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        """Project ``x`` and keep its spatial layout."""
        if self.kernel_size > 1:
            x = self.depthwise(x)
        return self.pointwise(x)


class ConvFFN(Module):
    """Depthwise conv, GELU, pointwise conv, with a residual around the branch."""

    def __init__(
        self,
        channels: int,
        kernel_size: int,
        *,
        rng: np.random.Generator,
        padding_mode: str = "zeros",
    ) -> None:
        """Create the branch convolutions."""
        super().__init__()
        self.depthwise = Conv2d(
            channels,
            channels,
            kernel_size,
            rng=rng,
            groups=channels,
            padding_mode=padding_mode,
        )
        self.pointwise = Conv2d(channels, channels, 1, rng=rng)

    def branch(self, x: Tensor) -> Tensor:
        """Return the block output without the residual."""
        return self.pointwise(ops.gelu(self.depthwise(x)))

    def forward(self, x: Tensor) -> Tensor:
        """Return ``x + branch(x)``."""
        return x + self.branch(x)


class PositionwiseFFN(Module):
    """Two pointwise layers with a GELU between, widening by ``expansion``."""

    def __init__(
        self, channels: int, *, rng: np.random.Generator, expansion: int = FFN_EXPANSION
    ) -> None:
        """Create the two layers."""
        super().__init__()
        self.fc1 = Conv2d(channels, channels * expansion, 1, rng=rng)
        self.fc2 = Conv2d(channels * expansion, channels, 1, rng=rng)

    def branch(self, x: Tensor) -> Tensor:
        """Return the block output without the residual."""
        return self.fc2(ops.gelu(self.fc1(x)))

    def forward(self, x: Tensor) -> Tensor:
        """Return ``x + branch(x)``."""
        return x + self.branch(x)


class ResBlock(Module):
    """Pre-activation residual block: (norm, GELU, 3×3 conv) twice plus a shortcut."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        *,
        rng: np.random.Generator,
        padding_mode: str = "zeros",
    ) -> None:
        """Create the block; a 1×1 shortcut is added when the widths differ."""
        super().__init__()
        self.norm1 = GroupNorm(in_channels)
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng=rng, padding_mode=padding_mode)
        self.norm2 = GroupNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng=rng, padding_mode=padding_mode)
        self.shortcut = (
            Conv2d(in_channels, out_channels, 1, rng=rng, bias=False)
            if in_channels != out_channels
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        """Apply the block."""
        h = self.conv1(ops.gelu(self.norm1(x)))
        h = self.conv2(ops.gelu(self.norm2(h)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return skip + h


def merge_patches(x: Tensor) -> Tensor:
    """Stack every 2×2 neighbourhood of ``x: N×C×H×W`` into ``N×4C×H/2×W/2``."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        msg = f"patch merging needs even extents, got {(h, w)}"
        raise ShapeError(msg)
    blocks = ops.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    blocks = ops.transpose(blocks, (0, 3, 5, 1, 2, 4))
    return ops.reshape(blocks, (n, 4 * c, h // 2, w // 2))


class PatchMerging(Module):
    """Halve the resolution by merging 2×2 patches, normalize, then project the width."""

    def __init__(
        self, in_channels: int, out_channels: int, *, rng: np.random.Generator
    ) -> None:
        """Create the norm and the pointwise reduction."""
        super().__init__()
        self.norm = GroupNorm(4 * in_channels)
        self.reduction = Conv2d(4 * in_channels, out_channels, 1, rng=rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        """Downsample ``x`` by two."""
        return self.reduction(self.norm(merge_patches(x)))


class Upsample(Module):
    """Nearest-neighbour ×2 upsampling followed by a 3×3 convolution."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        *,
        rng: np.random.Generator,
        padding_mode: str = "zeros",
    ) -> None:
        """Create the smoothing convolution."""
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng=rng, padding_mode=padding_mode)

    def forward(self, x: Tensor) -> Tensor:
        """Double the resolution of ``x``."""
        return self.conv(ops.upsample2x(x))
