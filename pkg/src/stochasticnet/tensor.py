"""Row-major float32 tensor constructors and checked indexing.

Tensors are plain C-contiguous ``numpy.ndarray`` values with dtype float32;
these helpers enforce the package-wide invariants (positive dims, matching
volume, finite values) at the points where data enters the system.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

DTYPE = np.float32

Tensor = np.ndarray
Shape = tuple[int, ...]


def check_shape(dims: Sequence[int]) -> Shape:
    """Validate a shape: non-empty, every dim a positive integer."""
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ValueError("shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ValueError(f"shape dims must be >= 1, got {dims}")
    return dims


def tensor_create(shape: Sequence[int], fill: float | Sequence[float] = 0.0) -> Tensor:
    """Create a float32 tensor of ``shape`` from a constant or a value list.

    A scalar ``fill`` broadcasts; a sequence must match the shape volume
    exactly.  Non-finite values are rejected.
    """
    dims = check_shape(shape)
    volume = int(np.prod(dims))
    if np.isscalar(fill):
        data = np.full(volume, fill, dtype=DTYPE)
    else:
        data = np.array(fill, dtype=DTYPE).ravel()  # copy: no aliasing with caller
        if data.size != volume:
            raise ValueError(
                f"value list has {data.size} entries, shape {dims} needs {volume}"
            )
    if not np.all(np.isfinite(data)):
        raise ValueError("tensor values must be finite")
    return np.ascontiguousarray(data.reshape(dims))


def tensor_index(t: Tensor, coords: Sequence[int]) -> float:
    """Return the element at ``coords`` with explicit bounds checking.

    Negative indices are out of bounds here; there is no wrap-around.
    """
    coords = tuple(int(c) for c in coords)
    if len(coords) != t.ndim:
        raise IndexError(f"expected {t.ndim} coordinates, got {len(coords)}")
    for axis, (c, d) in enumerate(zip(coords, t.shape)):
        if not 0 <= c < d:
            raise IndexError(f"coordinate {c} out of bounds for axis {axis} (dim {d})")
    return float(t[coords])


def as_tensor(values, shape: Sequence[int] | None = None) -> Tensor:
    """Coerce array-like data to a contiguous finite float32 tensor."""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(check_shape(shape))
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor values must be finite")
    return arr
