"""Dense tensors with reverse-mode automatic differentiation."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import ContractError

if TYPE_CHECKING:
    from collections.abc import Callable, Iterator, Sequence

_STATE = threading.local()


def default_dtype() -> np.dtype:
    """Return the floating dtype new tensors are created with on this thread."""
    return getattr(_STATE, "dtype", np.dtype(np.float32))


@contextmanager
def using_dtype(dtype: Any) -> Iterator[None]:
    """Create tensors (and parameters) with ``dtype`` inside the block."""
    previous = default_dtype()
    _STATE.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _STATE.dtype = previous


def is_grad_enabled() -> bool:
    """Return whether new operations are recorded on the tape."""
    return getattr(_STATE, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    previous = is_grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = previous


class Tensor:
    """
    Dense n-d array that may take part in the gradient tape.

    ``data`` is a row-major numpy buffer. Tensors produced by operations keep
    references to their inputs and a closure that maps the output gradient to
    input gradients; ``backward`` replays those closures in reverse
    topological order.
    """

    __array_priority__ = 1000

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        dtype: Any = None,
    ) -> None:
        """Wrap ``data``; non-floating input is cast to the default dtype."""
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(default_dtype())
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = (
            None
        )

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence[Tensor],
        op: str,
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ) -> Tensor:
        """Create an operation output and record it on the tape when needed."""
        out = cls(data, dtype=data.dtype)
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        """Extents of the tensor."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Rank of the tensor."""
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        """Element type of the buffer."""
        return self.data.dtype

    @property
    def size(self) -> int:
        """Number of elements."""
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Return the underlying buffer."""
        return self.data

    def item(self) -> float:
        """Return the value of a one-element tensor."""
        if self.data.size != 1:
            msg = f"Tensor of shape {self.shape} is not a scalar"
            raise ContractError(msg)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        """Return a tape-free tensor sharing the buffer."""
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype: Any) -> Tensor:
        """Return a tape-free copy with another dtype."""
        return Tensor(self.data.astype(dtype), dtype=dtype, requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        """Forget the accumulated gradient."""
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """
        Back-propagate from this tensor.

        Without ``grad`` the tensor must hold a single element (a scalar
        loss). Every reachable ``requires_grad`` tensor receives its gradient
        once; gradients of leaves accumulate across calls.
        """
        if not self.requires_grad:
            msg = "backward() called on a tensor that does not require grad"
            raise ContractError(msg)
        if grad is None:
            if self.data.size != 1:
                msg = f"backward() without a gradient needs a scalar, got {self.shape}"
                raise ContractError(msg)
            grad = np.ones_like(self.data)

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}

        for node in reversed(order):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            node.grad = node_grad if node.grad is None else node.grad + node_grad
            if node._backward is None:
                continue
            for parent, parent_grad in zip(
                node._parents, node._backward(node_grad), strict=True
            ):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad

    def __repr__(self) -> str:
        """Short description with shape, dtype and op."""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        """Extent of the leading axis."""
        return self.shape[0]

    # Operators delegate to medformer.ops
    def __add__(self, other: Tensor | float) -> Tensor:
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other: float) -> Tensor:
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other: Tensor | float) -> Tensor:
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other: float) -> Tensor:
        from . import ops

        return ops.add(ops.neg(self), other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other: float) -> Tensor:
        from . import ops

        return ops.mul(self, other)

    def __truediv__(self, other: Tensor | float) -> Tensor:
        from . import ops

        return ops.div(self, other)

    def __neg__(self) -> Tensor:
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, shape: Sequence[int]) -> Tensor:
        """Return a reshaped tensor."""
        from . import ops

        return ops.reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> Tensor:
        """Return a tensor with permuted axes."""
        from . import ops

        return ops.transpose(self, axes)

    def sum(self, axis: int | tuple[int, ...] | None = None, *, keepdims: bool = False) -> Tensor:
        """Sum over ``axis``."""
        from . import ops

        return ops.sum(self, axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, *, keepdims: bool = False) -> Tensor:
        """Mean over ``axis``."""
        from . import ops

        return ops.mean(self, axis, keepdims=keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
    """Return the recorded graph below ``root`` with inputs before outputs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        stack.extend(
            (parent, False)
            for parent in node._parents
            if parent.requires_grad and id(parent) not in visited
        )
    return order


def as_tensor(value: Tensor | np.ndarray | float) -> Tensor:
    """Return ``value`` as a tensor, wrapping constants."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)
