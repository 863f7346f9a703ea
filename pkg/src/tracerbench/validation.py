"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np

from .exceptions import InvalidArgumentError, InvalidStateError


def check_field(x, *, ndim=None, shape=None, name="field", dtype=np.float64,
                allow_nan=False):
    """Return ``x`` as a float ndarray, validating rank, shape and finiteness."""
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise InvalidArgumentError(f"{name}: expected {ndim}-D array, got shape {arr.shape}")
    if shape is not None:
        expected = tuple(shape)
        if arr.shape[-len(expected):] != expected:
            raise InvalidArgumentError(f"{name}: expected trailing shape {expected}, got {arr.shape}")
    if not allow_nan and not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name}: contains non-finite values")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if np.shape(a) != np.shape(b):
        raise InvalidArgumentError(
            f"shape mismatch: {names[0]} {np.shape(a)} vs {names[1]} {np.shape(b)}")


def check_positive(x, name="value"):
    arr = np.asarray(x)
    if not np.all(arr > 0):
        raise InvalidStateError(f"{name} must be strictly positive")
    return arr


def check_is_fitted(estimator, attributes):
    """Raise ``sklearn.exceptions.NotFittedError`` if attributes are missing."""
    from sklearn.exceptions import NotFittedError

    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(getattr(estimator, a, None) is not None for a in attributes):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet. "
            "Call 'fit' before using this estimator.")
