"""Dense float32 tensor substrate: shape bookkeeping, matmul, stable softmax.

Everything downstream (attention kernels, KV paging, the bench harness)
moves data through these handful of operations. Tensors are immutable,
row-major, and always 32-bit; masked attention scores are represented by
-inf entries, which ``row_softmax`` maps to exactly zero weight.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class MaskedRowError(ValueError):
    """A softmax row contains no finite entry, so it cannot be normalized."""


class Tensor:
    """Immutable dense array with explicit shape and flat row-major storage.

    Construction accepts anything ``np.asarray`` does; values are cast to
    float32 and frozen. ``shape`` may be passed to reinterpret flat input.
    """

    __slots__ = ("_array",)

    def __init__(self, values, shape: Sequence[int] | None = None):
        # Always copy: freezing a caller-supplied buffer in place would
        # change the caller's view of its own array.
        arr = np.array(values, dtype=DTYPE, order="C")
        if shape is not None:
            target = tuple(int(s) for s in shape)
            if any(s < 0 for s in target):
                raise ShapeError(f"negative extent in shape {target}")
            if _count(target) != arr.size:
                raise ShapeError(
                    f"cannot view {arr.size} elements as shape {target}"
                )
            arr = arr.reshape(target)
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=DTYPE))

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the storage (read-only)."""
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        """The backing ndarray (read-only)."""
        return self._array

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._array
        return self._array.astype(dtype)

    def __len__(self) -> int:
        return self._array.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _count(shape: Sequence[int]) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m x k] and b [k x n]."""
    if a.array.ndim != 2 or b.array.ndim != 2:
        raise ShapeError(
            f"matmul needs rank-2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return Tensor(np.matmul(a.array, b.array))


def transpose(a: Tensor) -> Tensor:
    """Swap the two axes of a rank-2 tensor."""
    if a.array.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got rank {a.array.ndim}")
    return Tensor(a.array.T)


def reshape(t: Tensor, new_shape: Sequence[int]) -> Tensor:
    """Reinterpret the flat data under a new shape; never reorders elements."""
    target = tuple(int(s) for s in new_shape)
    if _count(target) != t.array.size:
        raise ShapeError(
            f"reshape from {t.shape} to {target} changes element count "
            f"({t.array.size} vs {_count(target)})"
        )
    return Tensor(t.array.reshape(target))


def row_softmax(m: Tensor) -> Tensor:
    """Numerically stable softmax over each row of a rank-2 tensor.

    Entries at -inf get weight exactly 0. A row with no finite entry has no
    valid distribution and raises MaskedRowError.
    """
    arr = m.array
    if arr.ndim != 2:
        raise ShapeError(f"row_softmax needs a rank-2 tensor, got rank {arr.ndim}")
    if arr.shape[0] == 0:
        return Tensor(arr)
    if arr.shape[1] == 0:
        raise MaskedRowError("rows have zero columns, no finite entries")
    row_max = np.max(arr, axis=1)
    dead = ~np.isfinite(row_max)
    if np.any(dead):
        raise MaskedRowError(
            f"row {int(np.argmax(dead))} has no finite entry"
        )
    # exp(-inf - max) underflows to exactly 0, so masked entries drop out.
    e = np.exp(arr - row_max[:, None])
    return Tensor(e / e.sum(axis=1)[:, None])
