"""Poincare-ball primitives with ball parameter ``k`` (curvature ``-1/k``).

Every function works row-wise on the last axis, so a single point is a
1-D array and a batch of points is an ``(n, d)`` array.  The public
functions validate their inputs; the ``*_kernel`` variants skip
validation, clamp instead of raising and are what the autodiff tape
calls on its hot path.
"""

from __future__ import annotations

import numpy as np

from ._validation import (
    ARTANH_MAX,
    BALL_EPS,
    check_ball_points,
    check_curvature,
    check_same_dim,
    check_vectors,
)

__all__ = [
    "arcosh1p",
    "conformal_factor",
    "dist",
    "exp_o",
    "gyromidpoint",
    "log_o",
    "mobius_scalar",
    "project",
    "sqdist",
]

# below this norm the radial maps are replaced by their first-order limit
_TINY = 1e-15


def _norm(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=-1, keepdims=True))


def max_norm(k: float) -> float:
    return np.sqrt(k) * (1.0 - BALL_EPS)


def arcosh1p(z):
    """``arcosh(1 + z)`` without the cancellation of the naive form."""
    z = np.maximum(z, 0.0)
    return np.log1p(z + np.sqrt(z * z + 2.0 * z))


def project(x: np.ndarray, k: float) -> np.ndarray:
    """Pull points back inside ``||x|| <= sqrt(k) (1 - 1e-5)``."""
    r = _norm(x)
    limit = max_norm(k)
    scale = np.where(r > limit, limit / np.maximum(r, _TINY), 1.0)
    return x * scale


# -- kernels ---------------------------------------------------------------


def exp_o_kernel(v: np.ndarray, k: float) -> np.ndarray:
    s = np.sqrt(k)
    r = _norm(v)
    safe = np.maximum(r, _TINY)
    factor = np.where(r > _TINY, s * np.tanh(safe / s) / safe, 1.0)
    return project(v * factor, k)


def log_o_kernel(y: np.ndarray, k: float) -> np.ndarray:
    s = np.sqrt(k)
    r = _norm(y)
    safe = np.maximum(r, _TINY)
    t = np.minimum(safe / s, ARTANH_MAX)
    factor = np.where(r > _TINY, s * np.arctanh(t) / safe, 1.0)
    return y * factor


def mobius_scalar_kernel(a: float, y: np.ndarray, k: float) -> np.ndarray:
    s = np.sqrt(k)
    r = _norm(y)
    safe = np.maximum(r, _TINY)
    t = np.minimum(safe / s, ARTANH_MAX)
    factor = np.where(r > _TINY, s * np.tanh(a * np.arctanh(t)) / safe, a)
    return project(y * factor, k)


def conformal_factor_kernel(x: np.ndarray, k: float) -> np.ndarray:
    return 2.0 / (1.0 - np.sum(x * x, axis=-1) / k)


def _arcosh_arg(x: np.ndarray, y: np.ndarray, k: float) -> np.ndarray:
    diff = x - y
    q = np.sum(diff * diff, axis=-1)
    ax = k - np.sum(x * x, axis=-1)
    ay = k - np.sum(y * y, axis=-1)
    return 2.0 * k * q / (ax * ay)


def dist_kernel(x: np.ndarray, y: np.ndarray, k: float) -> np.ndarray:
    return np.sqrt(k) * arcosh1p(_arcosh_arg(x, y, k))


def sqdist_kernel(x: np.ndarray, y: np.ndarray, k: float) -> np.ndarray:
    d = dist_kernel(x, y, k)
    return d * d


# -- public API ------------------------------------------------------------


def exp_o(v, k: float = 1.0) -> np.ndarray:
    """Exponential map at the origin; the zero vector maps to the origin."""
    k = check_curvature(k)
    return exp_o_kernel(check_vectors(v, "v"), k)


def log_o(y, k: float = 1.0) -> np.ndarray:
    """Logarithmic map at the origin, inverse of :func:`exp_o`.

    Raises
    ------
    ValueError
        If any row of ``y`` lies on or outside the ball boundary.
    """
    k = check_curvature(k)
    return log_o_kernel(check_ball_points(y, k, "y"), k)


def mobius_scalar(a: float, y, k: float = 1.0) -> np.ndarray:
    """Mobius scalar multiplication ``a (x)_k y``."""
    k = check_curvature(k)
    return mobius_scalar_kernel(float(a), check_ball_points(y, k, "y"), k)


def conformal_factor(x, k: float = 1.0):
    """Conformal factor ``2 / (1 - ||x||^2 / k)``, always >= 2."""
    k = check_curvature(k)
    return conformal_factor_kernel(check_ball_points(x, k), k)


def dist(x, y, k: float = 1.0):
    """Geodesic distance between points of the same ball."""
    k = check_curvature(k)
    x = check_ball_points(x, k, "x")
    y = check_ball_points(y, k, "y")
    check_same_dim(x, y)
    return dist_kernel(x, y, k)


def sqdist(x, y, k: float = 1.0):
    return dist(x, y, k) ** 2


def gyromidpoint(points, weights=None, k: float = 1.0) -> np.ndarray:
    """Weighted gyromidpoint of the rows of ``points``.

    Parameters
    ----------
    points : array of shape (n, d)
        Points inside the ball.
    weights : array of shape (n,), optional
        Positive weights; unit weights when omitted.
    k : float
        Ball parameter.

    Returns
    -------
    ndarray of shape (d,)
    """
    k = check_curvature(k)
    points = check_ball_points(np.atleast_2d(points), k, "points")
    n = points.shape[0]
    if n == 0:
        raise ValueError("gyromidpoint of an empty set is undefined")
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {weights.shape}")
    if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
        raise ValueError("gyromidpoint weights must be positive and finite")
    lam = conformal_factor_kernel(points, k)
    coef = weights * lam / np.sum(weights * (lam - 1.0))
    return mobius_scalar_kernel(0.5, coef @ points, k)
