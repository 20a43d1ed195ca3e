"""Input validation shared across modules."""

import numpy as np


def check_image(x, name="image", allow_nd=True):
    """Return ``x`` as a finite floating array (float32 unless already float64)."""
    arr = np.asarray(x)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    if not allow_nd and arr.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W, C), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_batch(x, name="images"):
    arr = check_image(x, name)
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape (N, H, W, C), got {arr.shape}")
    return arr


def check_mask(mask, spatial_shape, name="mask"):
    """Binary mask of shape ``spatial_shape`` as a bool array."""
    m = np.asarray(mask)
    if m.shape != tuple(spatial_shape):
        raise ValueError(f"{name} has shape {m.shape}, expected {tuple(spatial_shape)}")
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ValueError(f"{name} must be binary")
        m = m.astype(bool)
    return m


def check_same_shape(a, b, what="arrays"):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what} shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def check_binary_labels(y, name="labels"):
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{name} must contain only 0 and 1")
    return y.astype(np.int64)
