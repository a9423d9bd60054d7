"""Synthetic paired dense-LiDAR / sparse-noisy-radar scenes, plus scene file I/O.

A scene is a set of randomly placed, non-overlapping boxes on a ground plane.
The LiDAR cloud samples box surfaces densely plus a uniform ground sprinkle;
the radar cloud is a small noisy subsample of the object returns plus uniform
clutter, so its pillar occupancy lands near ``radar_density_ratio`` times the
LiDAR occupancy.

Scene files are a small self-describing binary container (see module tail)
with a CSV export for eyeballing.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PlacementError, SceneParseError, ShapeError

MODALITIES = ("lidar", "radar")

# point record layout: x, y, z, intensity, vx, vy
POINT_FIELDS = 6

_OBJECT_Z_MAX = 1.8
_LENGTH_RANGE = (2.5, 6.0)
_WIDTH_RANGE = (1.2, 2.8)
_BOX_GAP = 0.2
_BOX_SPEED_SIGMA = 4.0


@dataclass
class PointCloud:
    """Points of one modality; columns are x, y, z, intensity, vx, vy."""

    modality: str
    points: np.ndarray

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ShapeError(f"unknown modality {self.modality!r}")
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, POINT_FIELDS)
        if self.points.size and not np.isfinite(self.points).all():
            raise ShapeError("point cloud contains non-finite values")
        if self.points.size and (self.points[:, 3] < 0).any():
            raise ShapeError("intensity must be >= 0")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class GTBox:
    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    class_id: int

    def __post_init__(self) -> None:
        if not (self.length > 0 and self.width > 0):
            raise ShapeError(f"box extents must be positive, got {self.length} x {self.width}")
        if not (-math.pi <= self.yaw < math.pi):
            raise ShapeError(f"yaw must lie in [-pi, pi), got {self.yaw}")
        if self.class_id < 0:
            raise ShapeError(f"class_id must be >= 0, got {self.class_id}")

    @property
    def circumradius(self) -> float:
        return math.hypot(self.length, self.width) / 2.0


@dataclass
class SceneConfig:
    range_x: tuple[float, float] = (-28.8, 28.8)
    range_y: tuple[float, float] = (-28.8, 28.8)
    n_boxes: int = 12
    lidar_points_per_box: int = 12
    ground_points: int = 560
    radar_density_ratio: float = 0.1
    radar_position_noise_sigma: float = 0.3
    radar_false_positive_rate: float = 0.05
    n_classes: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.range_x[0] < self.range_x[1] and self.range_y[0] < self.range_y[1]):
            raise ShapeError("degenerate detection range")
        if not (0.0 < self.radar_density_ratio <= 1.0):
            raise ShapeError(f"radar_density_ratio must be in (0, 1], got {self.radar_density_ratio}")
        if self.radar_position_noise_sigma < 0:
            raise ShapeError("noise sigma must be >= 0")
        if not (0.0 <= self.radar_false_positive_rate <= 1.0):
            raise ShapeError("false positive rate must be in [0, 1]")
        if min(self.n_boxes, self.lidar_points_per_box, self.ground_points) < 0:
            raise ShapeError("counts must be >= 0")
        if self.n_classes < 1:
            raise ShapeError("need at least one class")


@dataclass
class Scene:
    lidar: PointCloud
    radar: PointCloud
    boxes: list[GTBox]


def _clamp_into_range(points: np.ndarray, cfg: SceneConfig) -> None:
    # Cells are half-open [lo, hi): keep everything strictly below the top edge.
    hi_x = np.nextafter(cfg.range_x[1], -np.inf)
    hi_y = np.nextafter(cfg.range_y[1], -np.inf)
    np.clip(points[:, 0], cfg.range_x[0], hi_x, out=points[:, 0])
    np.clip(points[:, 1], cfg.range_y[0], hi_y, out=points[:, 1])


def _place_boxes(cfg: SceneConfig, rng: np.random.Generator) -> list[GTBox]:
    boxes: list[GTBox] = []
    max_tries = 200 * max(1, cfg.n_boxes)
    tries = 0
    while len(boxes) < cfg.n_boxes:
        if tries >= max_tries:
            raise PlacementError(
                f"could not place {cfg.n_boxes} disjoint boxes in "
                f"{cfg.range_x} x {cfg.range_y} after {max_tries} tries"
            )
        tries += 1
        length = rng.uniform(*_LENGTH_RANGE)
        width = rng.uniform(*_WIDTH_RANGE)
        yaw = rng.uniform(-math.pi, math.pi)
        r = math.hypot(length, width) / 2.0
        lo_x, hi_x = cfg.range_x[0] + r, cfg.range_x[1] - r
        lo_y, hi_y = cfg.range_y[0] + r, cfg.range_y[1] - r
        if lo_x >= hi_x or lo_y >= hi_y:
            raise PlacementError("detection range too small for the sampled box size")
        cx = rng.uniform(lo_x, hi_x)
        cy = rng.uniform(lo_y, hi_y)
        candidate = GTBox(cx, cy, length, width, yaw, int(rng.integers(cfg.n_classes)))
        if all(
            math.hypot(b.cx - cx, b.cy - cy) > b.circumradius + r + _BOX_GAP for b in boxes
        ):
            boxes.append(candidate)
    return boxes


def _perimeter_points(box: GTBox, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sample n points uniformly on the box's rectangle perimeter (world frame)."""
    half_l, half_w = box.length / 2.0, box.width / 2.0
    perim = 2.0 * (box.length + box.width)
    t = rng.uniform(0.0, perim, size=n)
    xs = np.empty(n)
    ys = np.empty(n)
    for i, ti in enumerate(t):
        if ti < box.length:
            xs[i], ys[i] = ti - half_l, -half_w
        elif ti < box.length + box.width:
            xs[i], ys[i] = half_l, (ti - box.length) - half_w
        elif ti < 2 * box.length + box.width:
            xs[i], ys[i] = (ti - 2 * box.length - box.width) + half_l, half_w
        else:
            xs[i], ys[i] = -half_l, (ti - 2 * box.length - box.width) - half_w
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    wx = box.cx + c * xs - s * ys
    wy = box.cy + s * xs + c * ys
    return np.stack([wx, wy], axis=1)


def gen_scene(cfg: SceneConfig) -> Scene:
    """Generate one paired scene, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    boxes = _place_boxes(cfg, rng)

    # LiDAR: dense surface returns per box, then a ground sprinkle.
    n_obj = cfg.n_boxes * cfg.lidar_points_per_box
    obj = np.zeros((n_obj, POINT_FIELDS))
    obj_box_idx = np.zeros(n_obj, dtype=np.int64)
    for b, box in enumerate(boxes):
        lo = b * cfg.lidar_points_per_box
        hi = lo + cfg.lidar_points_per_box
        obj[lo:hi, :2] = _perimeter_points(box, cfg.lidar_points_per_box, rng)
        obj[lo:hi, 2] = rng.uniform(0.0, _OBJECT_Z_MAX, size=cfg.lidar_points_per_box)
        obj[lo:hi, 3] = rng.uniform(0.0, 1.0, size=cfg.lidar_points_per_box)
        obj_box_idx[lo:hi] = b
    ground = np.zeros((cfg.ground_points, POINT_FIELDS))
    ground[:, 0] = rng.uniform(*cfg.range_x, size=cfg.ground_points)
    ground[:, 1] = rng.uniform(*cfg.range_y, size=cfg.ground_points)
    ground[:, 3] = rng.uniform(0.0, 1.0, size=cfg.ground_points)
    lidar_pts = np.concatenate([obj, ground], axis=0)
    _clamp_into_range(lidar_pts, cfg)

    # Radar: noisy subsample of the object returns, sized against the whole
    # LiDAR cloud, plus uniform multipath-style clutter.
    box_vel = rng.normal(0.0, _BOX_SPEED_SIGMA, size=(max(1, cfg.n_boxes), 2))
    n_radar_obj = min(int(round(cfg.radar_density_ratio * len(lidar_pts))), n_obj)
    if n_radar_obj > 0:
        pick = rng.choice(n_obj, size=n_radar_obj, replace=False)
        pick.sort()
        radar_obj = obj[pick].copy()
        radar_obj[:, :2] += rng.normal(0.0, cfg.radar_position_noise_sigma, size=(n_radar_obj, 2))
        radar_obj[:, 2] = 0.0
        radar_obj[:, 3] = rng.uniform(0.0, 1.0, size=n_radar_obj)
        radar_obj[:, 4:6] = box_vel[obj_box_idx[pick]]
    else:
        radar_obj = np.zeros((0, POINT_FIELDS))
    n_clutter = int(round(cfg.radar_false_positive_rate * n_radar_obj))
    clutter = np.zeros((n_clutter, POINT_FIELDS))
    if n_clutter:
        clutter[:, 0] = rng.uniform(*cfg.range_x, size=n_clutter)
        clutter[:, 1] = rng.uniform(*cfg.range_y, size=n_clutter)
        clutter[:, 3] = rng.uniform(0.0, 1.0, size=n_clutter)
        clutter[:, 4:6] = rng.normal(0.0, _BOX_SPEED_SIGMA, size=(n_clutter, 2))
    radar_pts = np.concatenate([radar_obj, clutter], axis=0)
    _clamp_into_range(radar_pts, cfg)

    return Scene(PointCloud("lidar", lidar_pts), PointCloud("radar", radar_pts), boxes)


# Scene container format, little-endian throughout:
#   header : magic b"BDLS", u16 version=1, u32 n_lidar, u32 n_radar, u32 n_boxes
#   lidar  : u8 tag 'L', then n_lidar * 6 f64 (x, y, z, intensity, vx, vy)
#   radar  : u8 tag 'R', then n_radar * 6 f64
#   boxes  : n_boxes * (5 f64: cx, cy, length, width, yaw; u32 class_id)

MAGIC = b"BDLS"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")
_BOX = struct.Struct("<5dI")
_SECTION_TAGS = {"lidar": b"L", "radar": b"R"}


def write_scene(path: str | Path, lidar: PointCloud, radar: PointCloud, boxes: list[GTBox]) -> None:
    blob = bytearray()
    blob += _HEADER.pack(MAGIC, VERSION, len(lidar), len(radar), len(boxes))
    for cloud in (lidar, radar):
        blob += _SECTION_TAGS[cloud.modality]
        blob += cloud.points.astype("<f8").tobytes()
    for box in boxes:
        blob += _BOX.pack(box.cx, box.cy, box.length, box.width, box.yaw, box.class_id)
    Path(path).write_bytes(bytes(blob))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise SceneParseError(
                f"truncated scene file: needed {n} bytes for {what} at byte {self.offset}, "
                f"only {len(self.data) - self.offset} remain"
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out


def read_scene(path: str | Path) -> tuple[PointCloud, PointCloud, list[GTBox]]:
    cur = _Cursor(Path(path).read_bytes())
    magic, version, n_lidar, n_radar, n_boxes = _HEADER.unpack(cur.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise SceneParseError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise SceneParseError(f"unsupported scene version {version} at byte 4")
    clouds = []
    for modality, count in (("lidar", n_lidar), ("radar", n_radar)):
        tag_offset = cur.offset
        tag = cur.take(1, "section tag")
        if tag != _SECTION_TAGS[modality]:
            raise SceneParseError(
                f"unknown modality tag {tag!r} at byte {tag_offset}, "
                f"expected {_SECTION_TAGS[modality]!r}"
            )
        raw = cur.take(count * POINT_FIELDS * 8, f"{modality} points")
        pts = np.frombuffer(raw, dtype="<f8").reshape(count, POINT_FIELDS).copy()
        clouds.append(PointCloud(modality, pts))
    boxes = []
    for _ in range(n_boxes):
        cx, cy, length, width, yaw, class_id = _BOX.unpack(cur.take(_BOX.size, "box record"))
        boxes.append(GTBox(cx, cy, length, width, yaw, class_id))
    if cur.offset != len(cur.data):
        raise SceneParseError(f"trailing garbage at byte {cur.offset}")
    return clouds[0], clouds[1], boxes


def export_csv(path: str | Path, lidar: PointCloud, radar: PointCloud) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["modality", "x", "y", "z", "intensity", "vx", "vy"])
        for cloud in (lidar, radar):
            for row in cloud.points:
                writer.writerow([cloud.modality] + [repr(v) for v in row])
