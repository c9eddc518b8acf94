"""Boxes, grids, and transforms among the LIDAR, camera, image and BEV frames.

LIDAR frame: x forward, y left, z up. Boxes are stored as ``(x, y, z, l, w, h,
yaw)`` with (x, y, z) the box centre and ``l`` measured along the heading.
Vectorised helpers take ``(N, 7)`` arrays in that column order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kitti_io import Calibration, GroundTruthObject


class OutOfExtent(ValueError):
    """The box footprint does not intersect the grid."""


class NotVisible(ValueError):
    """No part of the box projects into the image."""


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = a - 2 * np.pi * np.ceil((a - np.pi) / (2 * np.pi))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.l, self.w, self.h, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("box fields must be finite")
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dims must be positive, got {(self.l, self.w, self.h)}")
        for name in ("x", "y", "z", "l", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def center(self):
        return (self.x, self.y, self.z)

    @property
    def dims(self):
        return (self.l, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(v) for v in np.asarray(a).ravel()[:7]))


def as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, Box3D):
        return boxes.as_array()[None]
    if len(boxes) and isinstance(boxes[0], Box3D):
        return np.stack([b.as_array() for b in boxes])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 7)


@dataclass(frozen=True)
class BevGridSpec:
    x_range: tuple = (0.0, 70.4)
    y_range: tuple = (-40.0, 40.0)
    z_range: tuple = (-2.5, 0.5)
    resolution: float = 0.1
    n_slices: int = 5

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        for lo, hi in (self.x_range, self.y_range):
            cells = (hi - lo) / self.resolution
            if abs(cells - round(cells)) > 1e-6 or round(cells) < 1:
                raise ValueError(f"range {lo}..{hi} is not a whole number of cells")
        if not self.z_range[1] > self.z_range[0]:
            raise ValueError("empty z range")

    @property
    def height(self) -> int:
        """Number of cells along x (rows of the BEV maps)."""
        return int(round((self.x_range[1] - self.x_range[0]) / self.resolution))

    @property
    def width(self) -> int:
        """Number of cells along y (columns of the BEV maps)."""
        return int(round((self.y_range[1] - self.y_range[0]) / self.resolution))

    @property
    def shape(self):
        return (self.height, self.width, self.n_slices + 1)

    @property
    def slice_height(self) -> float:
        return (self.z_range[1] - self.z_range[0]) / self.n_slices


@dataclass(frozen=True)
class Rect2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if self.u_max < self.u_min or self.v_max < self.v_min:
            raise ValueError("inverted rect")

    def as_tuple(self):
        return (self.u_min, self.v_min, self.u_max, self.v_max)

    @property
    def area(self):
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)


# ---------------------------------------------------------------- transforms

def lidar_to_image(points, calib: Calibration):
    """Project LIDAR points into the image.

    Returns ``(uvd, in_front)`` where ``uvd`` is ``(N, 3)`` of pixel u, pixel v
    and rectified-camera depth, and ``in_front`` flags depth > 0.
    """
    pts = np.asarray(getattr(points, "xyz", points), dtype=np.float64).reshape(-1, 3)
    hom = np.hstack([pts, np.ones((len(pts), 1))])
    rect = hom @ calib.velo_to_rect().T
    img = rect @ calib.P2.T
    depth = rect[:, 2]
    in_front = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = img[:, :2] / img[:, 2:3]
    return np.column_stack([uv, depth]), in_front


def lidar_to_rect(points, calib: Calibration) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hom = np.hstack([pts, np.ones((len(pts), 1))])
    return (hom @ calib.velo_to_rect().T)[:, :3]


def rect_to_lidar(points, calib: Calibration) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    hom = np.hstack([pts, np.ones((len(pts), 1))])
    return (hom @ calib.rect_to_velo().T)[:, :3]


# Bottom face counter-clockwise from (+l/2, +w/2), then the top face in the same order.
_CORNER_SIGNS = np.array([
    [1, 1, -1], [-1, 1, -1], [-1, -1, -1], [1, -1, -1],
    [1, 1, 1], [-1, 1, 1], [-1, -1, 1], [1, -1, 1],
], dtype=np.float64) * 0.5


def corners_array(boxes) -> np.ndarray:
    """``(N, 8, 3)`` corners for an ``(N, 7)`` box array."""
    b = as_box_array(boxes)
    local = _CORNER_SIGNS[None] * b[:, None, 3:6]
    c, s = np.cos(b[:, 6]), np.sin(b[:, 6])
    x = c[:, None] * local[..., 0] - s[:, None] * local[..., 1]
    y = s[:, None] * local[..., 0] + c[:, None] * local[..., 1]
    return np.stack([x, y, local[..., 2]], axis=-1) + b[:, None, :3]


def box_to_corners(b: Box3D) -> np.ndarray:
    return corners_array(b)[0]


def footprints(boxes) -> np.ndarray:
    """``(N, 4, 2)`` counter-clockwise BEV footprint polygons."""
    return corners_array(boxes)[:, :4, :2]


def footprint_bounds(boxes) -> np.ndarray:
    """Axis-aligned ``(x_min, y_min, x_max, y_max)`` of each footprint, metres."""
    b = as_box_array(boxes)
    c, s = np.abs(np.cos(b[:, 6])), np.abs(np.sin(b[:, 6]))
    hx = 0.5 * (b[:, 3] * c + b[:, 4] * s)
    hy = 0.5 * (b[:, 3] * s + b[:, 4] * c)
    return np.column_stack([b[:, 0] - hx, b[:, 1] - hy, b[:, 0] + hx, b[:, 1] + hy])


def bev_rects(boxes, grid: BevGridSpec):
    """Cell-space footprint bounds clamped to the grid, plus an in-extent mask.

    Rows (u) follow x and columns (v) follow y, matching the BEV map layout.
    """
    fb = footprint_bounds(boxes)
    res = grid.resolution
    u0 = (fb[:, 0] - grid.x_range[0]) / res
    u1 = (fb[:, 2] - grid.x_range[0]) / res
    v0 = (fb[:, 1] - grid.y_range[0]) / res
    v1 = (fb[:, 3] - grid.y_range[0]) / res
    H, W = grid.height, grid.width
    inside = (u1 > 0) & (u0 < H) & (v1 > 0) & (v0 < W)
    rects = np.column_stack([np.clip(u0, 0, H), np.clip(v0, 0, W),
                             np.clip(u1, 0, H), np.clip(v1, 0, W)])
    return rects, inside


def box_to_bev_rect(b: Box3D, grid: BevGridSpec) -> Rect2D:
    rects, inside = bev_rects(b, grid)
    if not inside[0]:
        raise OutOfExtent(f"box at ({b.x:.2f}, {b.y:.2f}) lies outside the BEV grid")
    return Rect2D(*rects[0])


def image_rects(boxes, calib: Calibration, image_size):
    """Projected 2D bounds (u=column, v=row) of each box, clipped to the image.

    Returns ``(rects, visible)``. Corners behind the camera are ignored; a box is
    visible when at least one corner is in front and the clipped rect is non-empty.
    """
    b = as_box_array(boxes)
    n = len(b)
    if n == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=bool)
    corners = corners_array(b).reshape(-1, 3)
    uvd, front = lidar_to_image(corners, calib)
    uvd = uvd.reshape(n, 8, 3)
    front = front.reshape(n, 8)
    big = 1e12
    any_front = front.any(axis=1)
    u, v = uvd[..., 0], uvd[..., 1]
    umin = np.where(front, u, big).min(axis=1)
    umax = np.where(front, u, -big).max(axis=1)
    vmin = np.where(front, v, big).min(axis=1)
    vmax = np.where(front, v, -big).max(axis=1)
    H, W = image_size
    rects = np.column_stack([np.clip(umin, 0, W), np.clip(vmin, 0, H),
                             np.clip(umax, 0, W), np.clip(vmax, 0, H)])
    visible = any_front & (rects[:, 2] > rects[:, 0]) & (rects[:, 3] > rects[:, 1])
    return rects, visible


def box_to_image_roi(b: Box3D, calib: Calibration, image_size) -> Rect2D:
    rects, visible = image_rects(b, calib, image_size)
    if not visible[0]:
        raise NotVisible("box does not project into the image")
    return Rect2D(*rects[0])


def rect_to_window(rect, rows_axis="u"):
    """Integer half-open ``(r0, c0, r1, c1)`` window covering a continuous rect.

    ``rows_axis`` names which rect axis indexes tensor rows: ``"u"`` for BEV
    rects, ``"v"`` for image rects.
    """
    r = np.asarray(getattr(rect, "as_tuple", lambda: rect)(), dtype=np.float64).reshape(-1, 4)
    if rows_axis == "v":
        r = r[:, [1, 0, 3, 2]]
    lo = np.floor(r[:, :2] + 1e-9)
    hi = np.ceil(r[:, 2:] - 1e-9)
    return np.column_stack([lo, hi]).astype(np.int64)


# ---------------------------------------------------------------- label conversion

def camera_object_to_box(obj: GroundTruthObject, calib: Calibration | None = None) -> Box3D:
    """LIDAR-frame box for a label object.

    Without a calibration, the canonical KITTI axis permutation (camera x right,
    y down, z forward) is used; IoU-based evaluation is invariant to it.
    """
    h, w, l = obj.dims
    x, y, z = obj.location
    ry = obj.rotation_y
    heading_cam = np.array([math.cos(ry), 0.0, -math.sin(ry)])
    centre_cam = np.array([x, y - h / 2, z])
    if calib is None:
        centre = np.array([centre_cam[2], -centre_cam[0], -centre_cam[1]])
        heading = np.array([heading_cam[2], -heading_cam[0]])
    else:
        centre = rect_to_lidar(centre_cam, calib)[0]
        rot = calib.rect_to_velo()[:3, :3]
        heading = (rot @ heading_cam)[:2]
    yaw = math.atan2(heading[1], heading[0])
    return Box3D(centre[0], centre[1], centre[2], l, w, h, yaw)


def box_to_camera_object(b: Box3D, calib: Calibration, image_size=(375, 1242),
                         class_name="Car", score=None) -> GroundTruthObject:
    bottom = np.array([b.x, b.y, b.z - b.h / 2])
    loc = lidar_to_rect(bottom, calib)[0]
    rot = calib.velo_to_rect()[:3, :3]
    heading = rot @ np.array([math.cos(b.yaw), math.sin(b.yaw), 0.0])
    ry = wrap_angle(math.atan2(-heading[2], heading[0]))
    alpha = wrap_angle(ry - math.atan2(loc[0], loc[2]))
    rects, visible = image_rects(b, calib, image_size)
    bbox = tuple(float(v) for v in rects[0]) if visible[0] else (0.0, 0.0, 0.0, 0.0)
    return GroundTruthObject(class_name, 0.0, 0, alpha, bbox, (b.h, b.w, b.l),
                             tuple(float(v) for v in loc), ry, score)


def plane_to_lidar(plane, calib: Calibration | None) -> np.ndarray:
    """Express a camera-frame plane ``(a, b, c, d)`` in the LIDAR frame."""
    p = np.asarray(getattr(plane, "as_array", lambda: plane)(), dtype=np.float64)
    if calib is None:
        # canonical axis permutation: cam = (-y, -z, x)
        n = np.array([p[2], -p[0], -p[1]])
        return np.append(n, p[3])
    t = calib.velo_to_rect()
    n = t[:3, :3].T @ p[:3]
    d = p[:3] @ t[:3, 3] + p[3]
    return np.append(n, d)
