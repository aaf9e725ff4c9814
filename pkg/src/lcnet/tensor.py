"""Dense NCHW tensors.

A tensor here is a C-contiguous :class:`numpy.ndarray`.  Model data is
float32; float64 is used only by the gradient checker.  The helpers below pin
down the layout and comparison rules the rest of the package relies on.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InvalidShapeError

DTYPE = np.float32


def check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise InvalidShapeError("dims must be non-empty")
    if any(d < 1 for d in dims):
        raise InvalidShapeError(f"every extent must be >= 1, got {list(dims)}")
    return dims


def tensor_create(dims: Sequence[int], fill: float = 0.0, dtype=DTYPE) -> np.ndarray:
    """Return a freshly allocated tensor of ``dims`` with every element ``fill``."""
    return np.full(check_dims(dims), fill, dtype=dtype)


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Copy ``data`` into a contiguous tensor, validating its extents."""
    arr = np.array(data, dtype=dtype, order="C", copy=True)
    check_dims(arr.shape)
    return arr


def tensor_offset(dims: Sequence[int], index: Sequence[int]) -> int:
    """Row-major flat offset of ``index`` within a tensor of extents ``dims``."""
    dims = check_dims(dims)
    if len(index) != len(dims):
        raise IndexError(f"index has {len(index)} entries, tensor has {len(dims)} dims")
    offset = 0
    for axis, (i, extent) in enumerate(zip(index, dims)):
        if not 0 <= i < extent:
            raise IndexError(f"index {i} out of bounds for axis {axis} with extent {extent}")
        offset = offset * extent + i
    return offset


def tensor_allclose(a: np.ndarray, b: np.ndarray, rtol: float = 1e-5, atol: float = 1e-8) -> bool:
    """True iff shapes match and ``|a - b| <= atol + rtol * |b|`` everywhere.

    Asymmetric in the same way as :func:`numpy.allclose`; ``b`` is the reference.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        return False
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    return bool(np.all(np.abs(a64 - b64) <= atol + rtol * np.abs(b64)))
