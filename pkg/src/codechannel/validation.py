"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_probability(p: float, name: str, open_interval: bool = False) -> float:
    p = float(p)
    if np.isnan(p):
        raise ValueError(f"{name} is NaN")
    if open_interval:
        if not 0.0 < p < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {p}")
    elif not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return p


def check_positive(x: float, name: str) -> float:
    x = float(x)
    if not x > 0:
        raise ValueError(f"{name} must be positive, got {x}")
    return x


def check_count(n: int, name: str, minimum: int = 1) -> int:
    n = int(n)
    if n < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {n}")
    return n


def check_prob_vector(p, name: str, atol: float = 1e-9) -> np.ndarray:
    vec = as_float_array(p, name, ndim=1)
    if np.any(vec < 0):
        raise ValueError(f"{name} has negative entries")
    total = vec.sum()
    if abs(total - 1.0) > atol:
        raise ValueError(f"{name} must sum to 1, got {total}")
    return vec
