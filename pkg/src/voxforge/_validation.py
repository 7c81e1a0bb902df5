"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np

from .voxgrid import SparseOccupancyGrid


def check_points(points, name="points") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{name} contains non-finite values")
    return pts


def same_layout(a, b) -> bool:
    """Same grid dims and voxel size; origins may differ."""
    return a.dims == b.dims and a.voxel_size == b.voxel_size


def check_grid_list(X, volume=None, n=None, like=None) -> list:
    """Validate a list of grids sharing one layout.

    With ``like`` (a list of grids) each ``X[i]`` must share its exact volume.
    """
    if isinstance(X, SparseOccupancyGrid):
        X = [X]
    X = list(X)
    if not X:
        raise ValueError("expected at least one grid")
    if n is not None and len(X) != n:
        raise ValueError(f"expected {n} grids, got {len(X)}")
    for g in X:
        if not isinstance(g, SparseOccupancyGrid):
            raise TypeError(f"expected SparseOccupancyGrid, got {type(g).__name__}")
    vol = volume if volume is not None else X[0].volume
    for g in X:
        if not same_layout(g.volume, vol):
            raise ValueError(f"grid layout {g.volume.dims}@{g.volume.voxel_size} does not match "
                             f"{vol.dims}@{vol.voxel_size}")
    if like is not None:
        for g, h in zip(X, like):
            if g.volume != h.volume:
                raise ValueError(f"paired grids live in different volumes: {g.volume} vs {h.volume}")
    return X
