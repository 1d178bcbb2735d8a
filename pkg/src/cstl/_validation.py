"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numbers

import numpy as np


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_clip(clip, name="clip", allow_empty=False) -> np.ndarray:
    """A single silhouette clip as a float32 ``[N, H, W]`` array in [0, 1]."""
    arr = np.asarray(clip)
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape [N, H, W], got {arr.shape}")
    if arr.shape[0] == 0 and not allow_empty:
        raise ValueError(f"{name} has no frames")
    if not np.issubdtype(arr.dtype, np.number) and arr.dtype != bool:
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.float32, copy=False)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.size and arr.max() > 1.0:
        arr = arr / 255.0
    return arr


def check_clips(X) -> list[np.ndarray]:
    """A non-empty collection of clips sharing one frame size (lengths may differ)."""
    if isinstance(X, np.ndarray) and X.ndim in (3, 4) and X.dtype != object:
        X = [X] if X.ndim == 3 else list(X)
    clips = [check_clip(c, f"X[{i}]") for i, c in enumerate(X)]
    if not clips:
        raise ValueError("X is empty")
    sizes = {c.shape[1:] for c in clips}
    if len(sizes) > 1:
        raise ValueError(f"clips disagree on frame size: {sorted(sizes)}")
    return clips


def check_labels(y, n) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"y must be 1-D with {n} entries, got shape {y.shape}")
    return y
