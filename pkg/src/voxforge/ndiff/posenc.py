"""Sinusoidal positional encodings for integer grid coordinates."""
from __future__ import annotations

import numpy as np

__all__ = ["posenc", "posenc3d", "posenc2d"]


def posenc(cells, dims: int, grid_dims) -> np.ndarray:
    """Encode ``(N, A)`` integer cells in a grid of shape ``grid_dims``.

    Each axis gets ``dims / (2A)`` (sin, cos) pairs of the normalized
    coordinate ``u = (c + 0.5) / dim`` at frequencies ``2**f * pi``. Layout is
    axis-major: ``[sin f0, cos f0, sin f1, cos f1, ...]`` per axis.
    """
    cells = np.asarray(cells, dtype=np.float64)
    n_axes = len(grid_dims)
    cells = cells.reshape(-1, n_axes)
    if dims % (2 * n_axes):
        raise ValueError(f"encoding dims {dims} not divisible by {2 * n_axes}")
    n_freq = dims // (2 * n_axes)
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    u = (cells + 0.5) / np.asarray(grid_dims, dtype=np.float64)
    ang = u[:, :, None] * freqs[None, None, :]
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1)  # (N, A, F, 2)
    return out.reshape(len(cells), dims)


def posenc3d(cells, dims: int, grid_dims) -> np.ndarray:
    if len(grid_dims) != 3:
        raise ValueError("posenc3d needs 3 grid dims")
    return posenc(cells, dims, grid_dims)


def posenc2d(cells, dims: int, grid_dims) -> np.ndarray:
    if len(grid_dims) != 2:
        raise ValueError("posenc2d needs 2 grid dims")
    return posenc(cells, dims, grid_dims)
