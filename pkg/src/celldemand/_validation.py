"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_points(X) -> np.ndarray:
    """Finite ``(n, 2)`` float coordinates."""
    X = check_array(X, dtype=float, ensure_2d=True)
    if X.shape[1] != 2:
        raise ValueError(f"expected planar (n, 2) coordinates, got shape {X.shape}")
    return X


def check_random_state_seed(seed) -> int | None:
    if seed is None or isinstance(seed, numbers.Integral):
        return None if seed is None else int(seed)
    raise TypeError("random_state must be an int or None (numpy Generators are not reproducible across runs)")


def check_mask(mask, n: int) -> np.ndarray:
    """Boolean mask of length ``n``; ``None`` selects everything, index arrays are converted."""
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise ValueError(f"mask has shape {mask.shape}, expected ({n},)")
        return mask
    out = np.zeros(n, dtype=bool)
    out[mask.astype(int)] = True
    return out


def check_vector(y, n: int | None = None, name: str = "y") -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if n is not None and len(y) != n:
        raise ValueError(f"{name} has length {len(y)}, expected {n}")
    if not np.isfinite(y).all():
        raise ValueError(f"{name} contains non-finite values")
    return y
