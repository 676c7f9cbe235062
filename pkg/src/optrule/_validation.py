"""Small input-validation helpers used at public entry points."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} must contain only finite values")
    return arr


def check_probability(p: float, name: str) -> float:
    p = float(p)
    if not np.isfinite(p) or not 0.0 < p < 1.0:
        raise ValidationError(f"{name} must lie strictly inside (0, 1), got {p!r}")
    return p


def check_positive(x: float, name: str) -> float:
    x = float(x)
    if not np.isfinite(x) or x <= 0.0:
        raise ValidationError(f"{name} must be positive, got {x!r}")
    return x


def check_matching_length(n: int, arr: np.ndarray, name: str) -> None:
    if arr.shape[0] != n:
        raise ValidationError(f"{name} has length {arr.shape[0]}, expected {n}")


def readonly(arr: np.ndarray) -> np.ndarray:
    """Return a C-contiguous copy flagged read-only (types are immutable after construction)."""
    out = np.ascontiguousarray(arr)
    if out is arr:
        out = arr.copy()
    out.setflags(write=False)
    return out
