"""Input checks shared by the estimator and the harness."""

from __future__ import annotations

import numpy as np

from .exceptions import ValidationError


def check_images(X, n_sequences=None, image_size=None) -> np.ndarray:
    """Validate a ``[n, c, H, W]`` stack of preprocessed slices."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValidationError(f"expected images of shape [n, c, H, W], got {X.shape}")
    if n_sequences is not None and X.shape[1] != n_sequences:
        raise ValidationError(f"expected {n_sequences} sequences, got {X.shape[1]}")
    if image_size is not None and X.shape[-2:] != (image_size, image_size):
        raise ValidationError(f"expected {image_size}x{image_size} slices, got {X.shape[-2:]}; preprocess first")
    if not np.all(np.isfinite(X)):
        raise ValidationError("images contain non-finite values")
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValidationError("images must be min-max normalised to [0, 1]")
    return X


def check_masks(y, X=None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ValidationError(f"expected masks of shape [n, H, W], got {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("masks must be binary {0, 1}")
    if X is not None and (y.shape[0] != X.shape[0] or y.shape[1:] != X.shape[2:]):
        raise ValidationError(f"masks {y.shape} do not match images {X.shape}")
    return y.astype(np.uint8)


def check_available(available, X) -> np.ndarray:
    if available is None:
        return np.ones(X.shape[:2], dtype=bool)
    available = np.asarray(available, dtype=bool)
    if available.shape != X.shape[:2]:
        raise ValidationError(f"availability flags {available.shape} do not match images {X.shape[:2]}")
    return available


def check_texts(texts, n) -> list:
    if texts is None:
        return [None] * n
    texts = list(texts)
    if len(texts) != n:
        raise ValidationError(f"expected {n} texts/reports, got {len(texts)}")
    return texts
