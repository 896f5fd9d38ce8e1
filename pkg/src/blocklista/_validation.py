"""Exception types and input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values or fails to converge."""


class CapabilityError(RuntimeError):
    """Raised when a request exceeds a documented size guard."""


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, np.integer)):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValidationError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_complex_array(
    a,
    name: str,
    length: int | None = None,
    ndim: tuple[int, ...] = (1, 2),
) -> np.ndarray:
    """Coerce to a finite complex128 array whose last axis has ``length`` entries.

    sklearn's ``check_array`` rejects complex input, hence this helper.
    """
    arr = np.asarray(a)
    if arr.dtype.kind not in "biufc":
        raise ValidationError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.complex128, copy=False)
    if arr.ndim not in ndim:
        raise ValidationError(f"{name} must have ndim in {ndim}, got shape {arr.shape}")
    if length is not None and arr.shape[-1] != length:
        raise ValidationError(
            f"{name} has trailing length {arr.shape[-1]}, expected {length}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def check_square(a, name: str, n: int) -> np.ndarray:
    arr = np.asarray(a, dtype=np.complex128)
    if arr.shape != (n, n):
        raise ValidationError(f"{name} must have shape ({n}, {n}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def frozen(a: np.ndarray) -> np.ndarray:
    """Return ``a`` marked read-only so containers stay immutable."""
    a = np.array(a, order="C")
    a.setflags(write=False)
    return a
