"""Small numeric helpers: RK4 rollout of second-order systems, path resampling."""
from __future__ import annotations

import numpy as np


def integrate_second_order(accel, x0, v0, dt: float, steps: int):
    """Classical RK4 on xddot = accel(x, xdot).

    Returns (xs, vs) with shape (steps + 1, dim) including the initial state.
    """
    x = np.asarray(x0, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy()
    xs = np.empty((steps + 1, x.size))
    vs = np.empty_like(xs)
    xs[0], vs[0] = x, v
    for i in range(steps):
        k1x, k1v = v, accel(x, v)
        k2x, k2v = v + 0.5 * dt * k1v, accel(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v)
        k3x, k3v = v + 0.5 * dt * k2v, accel(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v)
        k4x, k4v = v + dt * k3v, accel(x + dt * k3x, v + dt * k3v)
        x = x + (dt / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
        v = v + (dt / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
        xs[i + 1], vs[i + 1] = x, v
    return xs, vs


def arc_lengths(path: np.ndarray) -> np.ndarray:
    """Cumulative arc length of a polyline (N, d); first entry 0."""
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def sample_at_arclength(path: np.ndarray, s_values: np.ndarray) -> np.ndarray:
    """Linearly interpolate a polyline at the given arc-length positions."""
    path = np.asarray(path, dtype=float)
    s = arc_lengths(path)
    total = s[-1]
    if total == 0.0:
        return np.repeat(path[:1], len(s_values), axis=0)
    s_values = np.clip(s_values, 0.0, total)
    out = np.empty((len(s_values), path.shape[1]))
    for d in range(path.shape[1]):
        out[:, d] = np.interp(s_values, s, path[:, d])
    return out


def resample_by_arclength(path: np.ndarray, n: int) -> np.ndarray:
    """Resample a polyline to n points equally spaced in arc length."""
    total = arc_lengths(np.asarray(path, dtype=float))[-1]
    return sample_at_arclength(path, np.linspace(0.0, total, n))
