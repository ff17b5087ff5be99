"""Input validation helpers for image arrays."""

import numpy as np


def check_image(img, name="image"):
    """Validate a single (H, W, C) float image with intensities in [0, 1]."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"{name}: expected (H, W, C) with C in {{1, 3}}, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        raise ValueError(f"{name}: expected float intensities, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name}: intensities outside [0, 1] "
                         f"(min {arr.min():.4f}, max {arr.max():.4f})")
    return arr


def check_image_batch(batch, name="images"):
    """Validate an (N, H, W, C) batch; a single image is promoted to N=1."""
    arr = np.asarray(batch)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] not in (1, 3):
        raise ValueError(f"{name}: expected (N, H, W, C) with C in {{1, 3}}, got {arr.shape}")
    check_image(arr[0], name=f"{name}[0]")
    return arr


def check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
