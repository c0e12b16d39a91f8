"""Fixed-grid quadrature over sliding windows of uniformly sampled data."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

RULES = ("trapezoid", "simpson")


def window_weights(n_intervals: int, dt: float, rule: str = "trapezoid") -> np.ndarray:
    """Weights ``w`` with ``sum_k w_k f(t_k)`` approximating the integral over one window.

    Simpson uses the composite 1/3 rule, closing with the 3/8 rule when the
    number of intervals is odd.
    """
    if n_intervals < 1:
        raise ValueError("a window needs at least one interval")
    w = np.zeros(n_intervals + 1)
    if rule == "trapezoid" or (rule == "simpson" and n_intervals < 2):
        w[:] = dt
        w[0] = w[-1] = dt / 2
        return w
    if rule != "simpson":
        raise ValueError(f"unknown quadrature rule {rule!r}; expected one of {RULES}")
    n13 = n_intervals if n_intervals % 2 == 0 else n_intervals - 3
    if n13 > 0:
        w13 = np.ones(n13 + 1)
        w13[1:-1:2] = 4
        w13[2:-1:2] = 2
        w[:n13 + 1] += w13 * dt / 3
    if n13 != n_intervals:
        w[n13:] += np.array([1, 3, 3, 1]) * 3 * dt / 8
    return w


def window_starts(n_samples: int, width: int, step: int) -> np.ndarray:
    """Start indices of windows of ``width`` intervals advancing by ``step`` samples."""
    if n_samples - 1 < width:
        return np.zeros(0, dtype=int)
    return np.arange(0, n_samples - width, step)


def windowed_integrals(values: np.ndarray, starts: np.ndarray, width: int,
                       weights: np.ndarray) -> np.ndarray:
    """Integrals of ``values`` (shape ``(N, ...)``) over each window ``[s, s + width]``."""
    view = sliding_window_view(values, width + 1, axis=0)   # (N - width, ..., width + 1)
    return np.tensordot(view[starts], weights, axes=([-1], [0]))
