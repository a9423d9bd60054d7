"""Ground-truth class heatmaps: Gaussian stamps at box centers on the feature grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .pillars import GridGeometry
from .scene import GTBox


@dataclass
class Heatmap:
    """K x H x W per-class scores in [0, 1] at feature-map resolution."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeError(f"heatmap must be 3-d (K,H,W), got {self.values.shape}")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ShapeError("heatmap values must lie in [0, 1]")

    @property
    def classes(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def render_gt_heatmap(
    boxes: list[GTBox],
    geom: GridGeometry,
    stride: int,
    n_classes: int,
    *,
    sigma_divisor: float = 6.0,
    min_sigma_cells: float = 1.0,
) -> tuple[Heatmap, int]:
    """Stamp one isotropic Gaussian per in-range box onto its class channel.

    The kernel is exp(-d^2 / (2 sigma^2)) with d measured in feature cells
    from the box's integer center cell, sigma = max(length, width) /
    (sigma_divisor * cell_size) floored at ``min_sigma_cells``. Overlapping
    stamps combine by per-cell maximum, so the center cell of every in-range
    box holds exactly 1. Returns the heatmap and the count of skipped
    (out-of-range) boxes.
    """
    if geom.height % stride or geom.width % stride:
        raise ShapeError(
            f"grid {geom.height}x{geom.width} is not divisible by stride {stride}"
        )
    hf, wf = geom.height // stride, geom.width // stride
    cell = geom.meters_per_cell * stride
    values = np.zeros((n_classes, hf, wf))
    rows = np.arange(hf, dtype=np.float64)[:, None]
    cols = np.arange(wf, dtype=np.float64)[None, :]
    skipped = 0
    for box in boxes:
        if not 0 <= box.class_id < n_classes:
            raise ShapeError(f"class_id {box.class_id} out of range for {n_classes} classes")
        ci = math.floor((box.cy - geom.y_min) / cell)
        cj = math.floor((box.cx - geom.x_min) / cell)
        if not (0 <= ci < hf and 0 <= cj < wf):
            skipped += 1
            continue
        sigma = max(min_sigma_cells, max(box.length, box.width) / (sigma_divisor * cell))
        d2 = (rows - ci) ** 2 + (cols - cj) ** 2
        stamp = np.exp(-d2 / (2.0 * sigma * sigma))
        np.maximum(values[box.class_id], stamp, out=values[box.class_id])
    return Heatmap(values), skipped
