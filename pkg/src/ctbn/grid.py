"""Shared time-grid construction for the exact and variational engines.

The grid is the union of a uniform base grid over [0, T] and the exact
observation times, so resets always fall on grid points while trajectories
with different observation times can share one grid.
"""

from __future__ import annotations

import numpy as np

from .model import ModelError

MIN_DT_REL = 1e-9


def make_grid(
    horizon: float,
    obs_times=(),
    step: float | None = None,
    base_steps: int = 400,
    boundary_refine: int = 0,
) -> np.ndarray:
    """Strictly increasing grid over [0, horizon] containing all obs times.

    ``step`` fixes the base spacing (default ``horizon / base_steps``).
    ``boundary_refine`` adds that many dyadically shrinking points before the
    terminal time, resolving the boundary layer induced by hard terminal
    evidence.
    """
    if horizon <= 0:
        raise ModelError("horizon must be positive")
    if step is None:
        step = horizon / base_steps
    if step <= 0:
        raise ModelError("grid step must be positive")
    n = max(1, int(round(horizon / step)))
    pts = [np.linspace(0.0, horizon, n + 1)]
    obs = np.asarray(list(obs_times), dtype=float)
    if obs.size:
        if obs.min() < 0 or obs.max() > horizon:
            raise ModelError("observation times outside [0, horizon]")
        pts.append(obs)
    if boundary_refine > 0:
        h = horizon / n
        pts.append(horizon - h / 2.0 ** np.arange(1, boundary_refine + 1))
    grid = np.unique(np.concatenate(pts))
    # drop points that collide within floating tolerance, keeping 0 and T
    min_dt = MIN_DT_REL * max(horizon, 1.0)
    keep = np.ones(len(grid), dtype=bool)
    keep[1:] = np.diff(grid) > min_dt
    grid = grid[keep]
    if grid[-1] != horizon:
        grid = np.append(grid[grid < horizon - min_dt], horizon)
    if grid[0] != 0.0:
        grid = np.concatenate([[0.0], grid[grid > min_dt]])
    return grid


def obs_grid_indices(grid: np.ndarray, obs_times: np.ndarray) -> np.ndarray:
    """Grid index of each observation time (times must lie on the grid)."""
    idx = np.searchsorted(grid, obs_times)
    idx = np.clip(idx, 0, len(grid) - 1)
    left_ok = np.abs(grid[np.maximum(idx - 1, 0)] - obs_times) < np.abs(grid[idx] - obs_times)
    idx = np.where(left_ok, idx - 1, idx)
    if np.any(np.abs(grid[idx] - obs_times) > MIN_DT_REL * max(grid[-1], 1.0) * 10):
        raise ModelError("observation time missing from grid")
    return idx


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    """Per-point trapezoidal quadrature weights; sums to the horizon."""
    w = np.zeros_like(grid)
    h = np.diff(grid)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w
