"""Pillar rasterization: point clouds -> sparse pillar grid -> initial BEV features.

The pillar encoder is deliberately deterministic: per-pillar statistics rather
than a learned embedding, so everything downstream of the initial BEV features
can be validated without a training confound. The occupancy channel makes the
channel-sum-positive test equivalent to "pillar is non-empty".
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .scene import PointCloud
from .tensor import FeatureMap

# feature layout of the deterministic encoder, padded with zeros to `channels`
F2D_STATS = ("log1p_count", "mean_intensity", "mean_z", "max_z", "mean_speed", "occupancy")
MIN_F2D_CHANNELS = len(F2D_STATS)


@dataclass(frozen=True)
class GridGeometry:
    """Axis-aligned BEV grid over a half-open range, row = y, column = x."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    meters_per_cell: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ShapeError("degenerate grid range")
        if not self.meters_per_cell > 0:
            raise ShapeError("meters_per_cell must be > 0")

    @property
    def height(self) -> int:
        return math.ceil((self.y_max - self.y_min) / self.meters_per_cell)

    @property
    def width(self) -> int:
        return math.ceil((self.x_max - self.x_min) / self.meters_per_cell)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (
            math.floor((y - self.y_min) / self.meters_per_cell),
            math.floor((x - self.x_min) / self.meters_per_cell),
        )


@dataclass
class PillarGrid:
    """Sparse mapping from occupied (row, col) cells to their point rows."""

    height: int
    width: int
    meters_per_cell: float
    cells: dict[tuple[int, int], np.ndarray]

    @property
    def n_occupied(self) -> int:
        return len(self.cells)


def pillarize(cloud: PointCloud, geom: GridGeometry) -> PillarGrid:
    """Bin points into half-open [lo, hi) cells; out-of-range points are dropped.

    Each cell's point rows are sorted lexicographically so downstream
    statistics are independent of the input point order, bit for bit.
    """
    pts = cloud.points
    cells: dict[tuple[int, int], np.ndarray] = {}
    if len(pts):
        rows = np.floor((pts[:, 1] - geom.y_min) / geom.meters_per_cell).astype(np.int64)
        cols = np.floor((pts[:, 0] - geom.x_min) / geom.meters_per_cell).astype(np.int64)
        keep = (rows >= 0) & (rows < geom.height) & (cols >= 0) & (cols < geom.width)
        rows, cols, pts = rows[keep], cols[keep], pts[keep]
        flat = rows * geom.width + cols
        order = np.argsort(flat, kind="stable")
        flat, pts = flat[order], pts[order]
        bounds = np.flatnonzero(np.diff(flat)) + 1
        for chunk, key in zip(
            np.split(pts, bounds), np.split(flat, bounds)
        ):
            canonical = chunk[np.lexsort(chunk.T[::-1])]
            cells[(int(key[0]) // geom.width, int(key[0]) % geom.width)] = canonical
    return PillarGrid(geom.height, geom.width, geom.meters_per_cell, cells)


def encode_pillars(grid: PillarGrid, channels: int = MIN_F2D_CHANNELS) -> FeatureMap:
    """Deterministic per-pillar statistics as the initial BEV feature map.

    Non-empty pillars get [log1p(count), mean intensity, mean z, max z,
    mean |v|, 1.0], zero-padded to ``channels``; empty pillars stay all-zero.
    """
    if channels < MIN_F2D_CHANNELS:
        raise ShapeError(f"need >= {MIN_F2D_CHANNELS} channels, got {channels}")
    values = np.zeros((channels, grid.height, grid.width))
    for (i, j), pts in grid.cells.items():
        speed = np.hypot(pts[:, 4], pts[:, 5])
        values[:MIN_F2D_CHANNELS, i, j] = (
            np.log1p(float(len(pts))),
            float(np.mean(pts[:, 3])),
            float(np.mean(pts[:, 2])),
            float(np.max(pts[:, 2])),
            float(np.mean(speed)),
            1.0,
        )
    return FeatureMap(values, stride=1, meters_per_cell=grid.meters_per_cell)


def pillar_density_ratio(lidar: PointCloud, radar: PointCloud, geom: GridGeometry) -> float:
    """Non-empty radar pillars over non-empty LiDAR pillars (0 when LiDAR is empty)."""
    n_lidar = pillarize(lidar, geom).n_occupied
    n_radar = pillarize(radar, geom).n_occupied
    return n_radar / n_lidar if n_lidar else 0.0
