"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


def check_frames(X, allow_empty=True) -> np.ndarray:
    """2-d finite float64 frame matrix."""
    return check_array(X, dtype=np.float64, ensure_min_samples=0 if allow_empty else 1,
                       ensure_all_finite=True)


def check_lengths(lengths, n_frames: int) -> np.ndarray:
    """Utterance lengths covering exactly ``n_frames``; ``None`` means one utterance."""
    if lengths is None:
        return np.array([n_frames], dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.ndim != 1 or np.any(lengths < 1):
        raise ValueError("lengths must be a 1-d array of positive integers")
    if lengths.sum() != n_frames:
        raise ValueError(f"lengths sum to {lengths.sum()}, but there are {n_frames} frames")
    return lengths


def check_labels(y, n_frames: int, n_classes: int | None = None, what="labels") -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_frames,):
        raise ValueError(f"{what}: expected shape ({n_frames},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError(f"{what} must be integers")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or (n_classes is not None and y.max() >= n_classes)):
        raise ValueError(f"{what} out of range [0, {n_classes})")
    return y
