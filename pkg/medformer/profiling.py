"""Multiply-accumulate counters for the instrumented kernels."""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from collections.abc import Iterator

_STATE = threading.local()


@dataclass
class MacCounter:
    """Accumulated multiply-accumulates, split by kernel kind."""

    by_kind: Counter[str] = field(default_factory=Counter)

    @property
    def total(self) -> int:
        """Return the MACs of every kind."""
        return sum(self.by_kind.values())

    def add(self, kind: str, macs: int) -> None:
        """Record ``macs`` multiply-accumulates of ``kind``."""
        self.by_kind[kind] += int(macs)


def _active() -> list[MacCounter]:
    stack = getattr(_STATE, "counters", None)
    if stack is None:
        stack = []
        _STATE.counters = stack
    return stack


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """
    Count MACs executed by matmul and conv kernels on this thread.

    Counters nest: an outer counter also sees the MACs of inner ones.
    """
    counter = MacCounter()
    stack = _active()
    stack.append(counter)
    try:
        yield counter
    finally:
        del stack[next(i for i, c in enumerate(stack) if c is counter)]


def record_macs(kind: str, macs: int) -> None:
    """Report MACs to every active counter."""
    for counter in _active():
        counter.add(kind, macs)
