"""Dense array construction and shape helpers.

All numerical state in this package is a contiguous row-major numpy array.
The canonical 5-axis layout is (batch N, channels C, depth D, height H,
width W). Training math runs in float32; the gradient-check harness
instantiates the same kernels at float64.
"""

from __future__ import annotations

import math

import numpy as np

DTYPE = np.float32


def _validate_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("empty shape")
    for s in shape:
        if s < 1:
            raise ValueError(f"non-positive extent in shape {shape}")
    return shape


def zeros(shape, dtype=DTYPE) -> np.ndarray:
    """Zero-filled array of the given shape; every extent must be >= 1."""
    return np.zeros(_validate_shape(shape), dtype=dtype)


def reshape(arr: np.ndarray, shape) -> np.ndarray:
    """Reshape without touching the flat row-major data."""
    shape = _validate_shape(shape)
    if math.prod(shape) != arr.size:
        raise ValueError(f"cannot reshape {arr.size} elements into {shape}")
    return arr.reshape(shape)


def row_major_offset(shape, index) -> int:
    """Flat offset of a multi-index under row-major (C) layout."""
    shape = _validate_shape(shape)
    if len(index) != len(shape):
        raise ValueError(f"index rank {len(index)} != shape rank {len(shape)}")
    offset = 0
    for extent, i in zip(shape, index):
        if not 0 <= i < extent:
            raise IndexError(f"index {tuple(index)} out of bounds for shape {shape}")
        offset = offset * extent + i
    return offset
