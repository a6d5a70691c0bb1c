"""Input validation helpers shared by the pipeline, estimators and metrics."""

from __future__ import annotations

import numpy as np

from .errors import MetricInputError, PreprocessingError


def check_rgb_raster(raw) -> np.ndarray:
    """Return ``raw`` as an (H, W, 3) array of 8-bit-range values.

    Accepts PIL images (converted to RGB only if already RGB/RGBA/L) and numpy
    arrays. Raises :class:`PreprocessingError` for anything else.
    """
    if hasattr(raw, "mode") and hasattr(raw, "size"):
        if raw.mode != "RGB":
            raise PreprocessingError(f"expected an RGB image, got mode {raw.mode}")
        raw = np.asarray(raw)
    arr = np.asarray(raw)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PreprocessingError(f"expected an (H, W, 3) RGB raster, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise PreprocessingError("zero-area image")
    if not np.issubdtype(arr.dtype, np.number) or np.issubdtype(arr.dtype, np.complexfloating):
        raise PreprocessingError(f"non-numeric pixel dtype {arr.dtype}")
    if arr.dtype != np.uint8:
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 255:
            raise PreprocessingError("pixel values must lie in [0, 255]")
    return arr


def check_image_tensor(img, shape=None) -> np.ndarray:
    """Validate a preprocessed (H, W, 3) float image with values in [0, 1]."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PreprocessingError(f"expected (H, W, 3) tensor, got {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise PreprocessingError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0 or not np.isfinite(arr).all()):
        raise PreprocessingError("tensor values must lie in [0, 1]")
    return arr


def check_image_batch(X, shape=None) -> np.ndarray:
    """Validate an (N, H, W, 3) batch of preprocessed images."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise PreprocessingError(f"expected (N, H, W, 3) batch, got {arr.shape}")
    if shape is not None and arr.shape[1:] != tuple(shape):
        raise PreprocessingError(f"expected images of shape {tuple(shape)}, got {arr.shape[1:]}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise PreprocessingError("batch values must lie in [0, 1]")
    return arr


def check_label_vector(y, n_classes: int | None = None, name: str = "labels") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise MetricInputError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        return arr.astype(np.int64)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise MetricInputError(f"{name} must be integer class indices")
    arr = arr.astype(np.int64)
    if n_classes is not None and (arr.min() < 0 or arr.max() >= n_classes):
        raise MetricInputError(f"{name} must lie in [0, {n_classes})")
    return arr


def check_consistent_length(*arrays):
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise MetricInputError(f"inconsistent lengths: {sorted(lengths)}")
