"""Shape algebra and row-major index bijections.

Dense values are plain ``numpy.ndarray`` objects; this module only adds the
checked conversions the tensor-train code relies on.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import CountMismatch, OutOfRange, ShapeError

_INDEX_MAX = np.iinfo(np.int64).max


def check_shape(dims: Sequence[int]) -> tuple[int, ...]:
    """Validate mode sizes and return them as a tuple.

    Raises ShapeError for non-positive dims or if the element count would
    not fit in a signed 64-bit index.
    """
    dims = tuple(int(d) for d in dims)
    if not dims or any(d < 1 for d in dims):
        raise ShapeError(f"dims must be positive, got {dims}")
    if numel(dims) > _INDEX_MAX:
        raise ShapeError(f"element count of {dims} overflows int64")
    return dims


def numel(dims: Sequence[int]) -> int:
    n = 1
    for d in dims:
        n *= int(d)
    return n


def reshape(t: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    shape = check_shape(shape)
    if numel(shape) != t.size:
        raise CountMismatch(f"cannot reshape {t.shape} ({t.size} elements) to {shape}")
    return np.reshape(t, shape, order="C")


def multi_to_flat(idx: Sequence[int], shape: Sequence[int]) -> int:
    shape = check_shape(shape)
    if len(idx) != len(shape):
        raise OutOfRange(f"index {tuple(idx)} has wrong arity for shape {shape}")
    flat = 0
    for i, d in zip(idx, shape):
        if not 0 <= i < d:
            raise OutOfRange(f"index {tuple(idx)} out of range for shape {shape}")
        flat = flat * d + int(i)
    return flat


def flat_to_multi(i: int, shape: Sequence[int]) -> list[int]:
    shape = check_shape(shape)
    if not 0 <= i < numel(shape):
        raise OutOfRange(f"flat index {i} out of range for shape {shape}")
    out = []
    for d in reversed(shape):
        i, r = divmod(int(i), d)
        out.append(r)
    return out[::-1]


def pair_index(i: int, j: int, m: int, n: int) -> int:
    """Merge a (row, col) mode pair into one index of a mode of size m*n."""
    if not (0 <= i < m and 0 <= j < n):
        raise OutOfRange(f"pair ({i}, {j}) out of range for ({m}, {n})")
    return i * n + j
