"""Input validation helpers used at public API boundaries."""

from __future__ import annotations

import numpy as np

from rarecp.errors import DataError, NotFittedError


def check_vector(x, name: str = "x", allow_empty: bool = False) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if arr.size == 0 and not allow_empty:
        raise DataError(f"{name} must not be empty")
    if arr.size and not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_matrix(x, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_unit_interval(value: float, name: str = "alpha") -> float:
    """Require a scalar strictly inside (0, 1)."""
    value = float(value)
    if not 0.0 < value < 1.0:
        raise DataError(f"{name} must lie strictly in (0, 1), got {value}")
    return value


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0.0:
        raise DataError(f"{name} must be positive, got {value}")
    return value


def check_positive_int(value: int, name: str) -> int:
    ivalue = int(value)
    if ivalue != value or ivalue < 1:
        raise DataError(f"{name} must be a positive integer, got {value!r}")
    return ivalue


def check_fitted(obj, attribute: str) -> None:
    if getattr(obj, attribute, None) is None:
        raise NotFittedError(
            f"{type(obj).__name__} is not fitted; call fit() or load a checkpoint"
        )
