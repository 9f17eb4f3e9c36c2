"""Named parameter registry with frozen flags and stable iteration order."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import DiffcoreError, Tensor


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    group: str
    frozen: bool


class ParameterRegistry:
    """Ordered mapping name -> parameter tensor.

    Frozen entries never accumulate gradient (their tensors are marked
    non-differentiable). Iteration order is registration order.
    """

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def register(self, name: str, tensor: Tensor, group: str = "default",
                 frozen: bool = False) -> Tensor:
        if name in self._entries:
            raise DiffcoreError(f"parameter {name!r} already registered")
        tensor.requires_grad = not frozen
        self._entries[name] = ParamEntry(name, tensor, group, frozen)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def trainable(self) -> Iterator[ParamEntry]:
        return (e for e in self._entries.values() if not e.frozen)

    def names(self) -> list[str]:
        return list(self._entries)

    def groups(self) -> set[str]:
        return {e.group for e in self._entries.values()}

    def group_entries(self, group: str) -> list[ParamEntry]:
        return [e for e in self._entries.values() if e.group == group]

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.tensor.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy of every parameter's data, keyed by name."""
        return {e.name: e.tensor.data.copy() for e in self._entries.values()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for e in self._entries.values():
            src = snap[e.name]
            if src.shape != e.tensor.data.shape:
                raise DiffcoreError(
                    f"snapshot shape mismatch for {e.name}: "
                    f"{src.shape} vs {e.tensor.data.shape}"
                )
            e.tensor.data = src.copy()
