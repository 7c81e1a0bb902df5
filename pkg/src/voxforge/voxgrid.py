"""Sparse voxel coordinate algebra.

Cells are stored as a lexicographically sorted ``(N, 3)`` int64 array with no
duplicates. Every grid carries its :class:`VolumeSpec`, so the world position
of cell ``c`` is ``origin + c * voxel_size`` (lower corner).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "VolumeSpec",
    "SparseOccupancyGrid",
    "voxelize",
    "downsample2x",
    "upscale2x",
    "dilate",
    "iou",
    "cells_to_keys",
    "keys_to_cells",
    "write_vxg",
    "read_vxg",
]

VXG_MAGIC = b"VXG1"


@dataclass(frozen=True)
class VolumeSpec:
    origin: tuple
    extent: tuple
    voxel_size: float

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        extent = tuple(float(v) for v in self.extent)
        if len(origin) != 3 or len(extent) != 3:
            raise ValueError("origin and extent must have three components")
        if min(extent) <= 0:
            raise ValueError(f"extent must be positive, got {extent}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "extent", extent)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        dims = tuple(int(round(e / self.voxel_size)) for e in extent)
        if min(dims) < 1:
            raise ValueError(f"volume has empty dimension: {dims}")

    @property
    def dims(self) -> tuple:
        return tuple(int(round(e / self.voxel_size)) for e in self.extent)

    def with_voxel_size(self, voxel_size: float) -> "VolumeSpec":
        return VolumeSpec(self.origin, self.extent, voxel_size)

    def translated(self, offset_cells) -> "VolumeSpec":
        o = np.asarray(self.origin) + np.asarray(offset_cells, dtype=float) * self.voxel_size
        return VolumeSpec(tuple(o), self.extent, self.voxel_size)

    def cell_centers(self, cells) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.float64).reshape(-1, 3)
        return np.asarray(self.origin) + (cells + 0.5) * self.voxel_size

    def contains(self, cells) -> np.ndarray:
        cells = np.asarray(cells).reshape(-1, 3)
        return np.all((cells >= 0) & (cells < np.asarray(self.dims)), axis=1)


def cells_to_keys(cells, dims) -> np.ndarray:
    """Linear keys whose order matches lexicographic (i, j, k) order."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    return np.ravel_multi_index(cells.T, dims) if len(cells) else np.zeros(0, np.int64)


def keys_to_cells(keys, dims) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    if len(keys) == 0:
        return np.zeros((0, 3), np.int64)
    return np.stack(np.unravel_index(keys, dims), axis=1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class SparseOccupancyGrid:
    volume: VolumeSpec
    cells: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    dropped: int = 0

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 3)
        if len(cells) and not self.volume.contains(cells).all():
            raise ValueError("cells outside volume dims")
        keys = np.unique(cells_to_keys(cells, self.volume.dims))
        cells = keys_to_cells(keys, self.volume.dims)
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def from_keys(cls, volume, keys):
        return cls(volume, keys_to_cells(np.unique(keys), volume.dims))

    @classmethod
    def from_dense(cls, volume, occupancy):
        return cls(volume, np.argwhere(occupancy))

    def __len__(self):
        return len(self.cells)

    def __eq__(self, other):
        if not isinstance(other, SparseOccupancyGrid):
            return NotImplemented
        return self.volume == other.volume and np.array_equal(self.cells, other.cells)

    def __hash__(self):
        return hash((self.volume, self.cells.tobytes()))

    @property
    def keys(self) -> np.ndarray:
        return cells_to_keys(self.cells, self.volume.dims)

    def dense(self) -> np.ndarray:
        occ = np.zeros(self.volume.dims, dtype=bool)
        if len(self.cells):
            occ[tuple(self.cells.T)] = True
        return occ

    def centers(self) -> np.ndarray:
        return self.volume.cell_centers(self.cells)

    def cell_set(self) -> set:
        return set(map(tuple, self.cells.tolist()))

    def with_cells(self, cells) -> "SparseOccupancyGrid":
        return SparseOccupancyGrid(self.volume, cells)

    def union(self, other) -> "SparseOccupancyGrid":
        _check_same_volume(self, other)
        return SparseOccupancyGrid.from_keys(self.volume, np.concatenate([self.keys, other.keys]))

    def intersection(self, other) -> "SparseOccupancyGrid":
        _check_same_volume(self, other)
        return SparseOccupancyGrid.from_keys(self.volume, np.intersect1d(self.keys, other.keys))


def _check_same_volume(a, b):
    if a.volume != b.volume:
        raise ValueError(f"volume mismatch: {a.volume} vs {b.volume}")


def voxelize(points, volume: VolumeSpec) -> SparseOccupancyGrid:
    """Floor points into cells; out-of-volume points are counted in ``dropped``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return SparseOccupancyGrid(volume)
    cells = np.floor((pts - np.asarray(volume.origin)) / volume.voxel_size).astype(np.int64)
    inside = volume.contains(cells)
    return SparseOccupancyGrid(volume, cells[inside], dropped=int((~inside).sum()))


def downsample2x(grid: SparseOccupancyGrid) -> SparseOccupancyGrid:
    vol = grid.volume
    coarse = VolumeSpec(vol.origin, vol.extent, vol.voxel_size * 2)
    cells = np.floor_divide(grid.cells, 2)
    # odd fine dims can round a boundary cell past the coarse dims
    return SparseOccupancyGrid(coarse, cells[coarse.contains(cells)])


def upscale2x(grid: SparseOccupancyGrid) -> SparseOccupancyGrid:
    vol = grid.volume
    fine = VolumeSpec(vol.origin, vol.extent, vol.voxel_size / 2)
    offsets = np.array(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij")).reshape(3, -1).T
    cells = (2 * grid.cells[:, None, :] + offsets[None]).reshape(-1, 3)
    return SparseOccupancyGrid(fine, cells)


def dilate_dense(occupancy: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return occupancy.copy()
    return ndimage.binary_dilation(occupancy, structure=np.ones((3, 3, 3), bool), iterations=r)


def dilate(grid: SparseOccupancyGrid, r: int) -> np.ndarray:
    """Cells within l-inf distance ``r`` of an occupied cell, clipped to the volume.

    Returns a sorted ``(M, 3)`` array.
    """
    if r < 0:
        raise ValueError("radius must be non-negative")
    if len(grid) == 0:
        return np.zeros((0, 3), np.int64)
    return np.argwhere(dilate_dense(grid.dense(), int(r))).astype(np.int64)


def iou(a: SparseOccupancyGrid, b: SparseOccupancyGrid, mask=None) -> float:
    _check_same_volume(a, b)
    ka, kb = a.keys, b.keys
    if mask is not None:
        mk = mask.keys if isinstance(mask, SparseOccupancyGrid) else cells_to_keys(mask, a.volume.dims)
        ka = np.intersect1d(ka, mk)
        kb = np.intersect1d(kb, mk)
    union = len(np.union1d(ka, kb))
    if union == 0:
        return 1.0
    return len(np.intersect1d(ka, kb)) / union


def write_vxg(fh, grid: SparseOccupancyGrid) -> None:
    vol = grid.volume
    fh.write(VXG_MAGIC)
    fh.write(struct.pack("<7d", *vol.origin, *vol.extent, vol.voxel_size))
    fh.write(struct.pack("<Q", len(grid)))
    fh.write(grid.cells.astype("<i4").tobytes())


def read_vxg(fh) -> SparseOccupancyGrid:
    magic = fh.read(4)
    if magic != VXG_MAGIC:
        raise ValueError(f"bad grid magic {magic!r}")
    vals = struct.unpack("<7d", fh.read(56))
    (n,) = struct.unpack("<Q", fh.read(8))
    cells = np.frombuffer(fh.read(12 * n), dtype="<i4").reshape(n, 3)
    return SparseOccupancyGrid(VolumeSpec(vals[:3], vals[3:6], vals[6]), cells)
