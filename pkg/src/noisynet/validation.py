"""Input validation helpers shared by the estimator, network, and attack code."""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError


def as_float_array(x, name: str = "array") -> np.ndarray:
    """Coerce to float64, rejecting non-finite values."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_batch(x, name: str = "x") -> np.ndarray:
    """Validate a sample batch: 2-D (n, features) or 4-D (n, C, H, W)."""
    arr = as_float_array(x, name)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim not in (2, 4):
        raise DimensionError(
            f"{name} must be (n, features) or (n, C, H, W), got shape {arr.shape}"
        )
    return arr


def check_unit_range(x, name: str = "x") -> np.ndarray:
    arr = as_float_array(x, name)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got range "
                         f"[{arr.min():.4g}, {arr.max():.4g}]")
    return arr


def check_labels(y, n_classes: int | None = None, name: str = "y") -> np.ndarray:
    """Validate integer class labels, optionally against a class count."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D class indices, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        rounded = np.rint(np.asarray(arr, dtype=np.float64))
        if not np.array_equal(rounded, np.asarray(arr, dtype=np.float64)):
            raise ValueError(f"{name} must contain integer class indices")
        arr = rounded
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name} contains negative class index {arr.min()}")
    if n_classes is not None and arr.size and arr.max() >= n_classes:
        raise ValueError(
            f"{name} contains class index {arr.max()} out of range [0, {n_classes})"
        )
    return arr
