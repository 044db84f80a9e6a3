"""Input validation helpers shared by the public API."""

from __future__ import annotations

import numbers

import numpy as np

BALL_EPS = 1e-5
ARTANH_MAX = 1.0 - 1e-7


def check_curvature(k) -> float:
    if not isinstance(k, numbers.Real) or isinstance(k, bool):
        raise ValueError(f"curvature must be a real number, got {k!r}")
    k = float(k)
    if not np.isfinite(k) or k <= 0:
        raise ValueError(f"curvature k must be positive and finite, got {k}")
    return k


def check_vectors(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        raise ValueError(f"{name} must be at least 1-dimensional")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def check_ball_points(x, k: float, name: str = "x") -> np.ndarray:
    """Return ``x`` as float64 after checking every row lies inside the ball."""
    x = check_vectors(x, name)
    sq = np.sum(x * x, axis=-1)
    if np.any(sq >= k):
        raise ValueError(f"{name} lies outside the Poincare ball of parameter k={k}")
    return x


def check_same_dim(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")


def check_choice(value, name: str, choices) -> str:
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_non_negative(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not value >= 0:
        raise ValueError(f"{name} must be a non-negative real, got {value!r}")
    return float(value)


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
