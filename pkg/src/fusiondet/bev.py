"""Six-channel bird's-eye-view rasterization of LIDAR point clouds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BevGridSpec

_LOG64 = math.log(64.0)


def cell_density(n_points):
    """Density channel value for a cell holding ``n_points`` returns."""
    n = np.asarray(n_points, dtype=np.float64)
    out = np.minimum(1.0, np.log(n + 1.0) / _LOG64)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BevMaps:
    grid: BevGridSpec
    channels: np.ndarray  # (H, W, n_slices + 1) float32

    @property
    def density(self) -> np.ndarray:
        return self.channels[..., -1]

    def to_bytes(self) -> bytes:
        H, W, C = self.channels.shape
        return f"{H} {W} {C}\n".encode() + self.channels.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, grid: BevGridSpec) -> "BevMaps":
        header, _, body = raw.partition(b"\n")
        H, W, C = (int(v) for v in header.split())
        data = np.frombuffer(body, dtype="<f4")
        if data.size != H * W * C:
            raise ValueError(f"BEV dump holds {data.size} values, header says {H * W * C}")
        return cls(grid, data.reshape(H, W, C).astype(np.float32))


def point_cells(xyz: np.ndarray, grid: BevGridSpec):
    """Row, column and slice index of each point plus the in-range mask."""
    xyz = np.asarray(xyz, dtype=np.float64)
    res = grid.resolution
    i = np.floor((xyz[:, 0] - grid.x_range[0]) / res).astype(np.int64)
    j = np.floor((xyz[:, 1] - grid.y_range[0]) / res).astype(np.int64)
    dz = grid.slice_height
    s = np.floor((xyz[:, 2] - grid.z_range[0]) / dz).astype(np.int64)
    keep = ((i >= 0) & (i < grid.height) & (j >= 0) & (j < grid.width)
            & (s >= 0) & (s < grid.n_slices)
            & (xyz[:, 0] >= grid.x_range[0]) & (xyz[:, 0] < grid.x_range[1])
            & (xyz[:, 1] >= grid.y_range[0]) & (xyz[:, 1] < grid.y_range[1])
            & (xyz[:, 2] >= grid.z_range[0]) & (xyz[:, 2] < grid.z_range[1]))
    return i, j, s, keep


def slice_height_value(z, s, grid: BevGridSpec):
    """Height of ``z`` above the floor of slice ``s``, as a fraction of the slice span."""
    dz = grid.slice_height
    return np.clip((z - (grid.z_range[0] + s * dz)) / dz, 0.0, 1.0)


def encode_bev(pc, grid: BevGridSpec) -> BevMaps:
    pts = np.asarray(getattr(pc, "points", pc), dtype=np.float64).reshape(-1, 4)
    H, W, S = grid.height, grid.width, grid.n_slices
    i, j, s, keep = point_cells(pts[:, :3], grid)
    i, j, s = i[keep], j[keep], s[keep]
    val = slice_height_value(pts[keep, 2], s, grid)

    heights = np.zeros(H * W * S)
    np.maximum.at(heights, (i * W + j) * S + s, val)
    counts = np.bincount(i * W + j, minlength=H * W)

    channels = np.empty((H, W, S + 1), dtype=np.float32)
    channels[..., :S] = heights.reshape(H, W, S)
    channels[..., S] = cell_density(counts).reshape(H, W)
    return BevMaps(grid, channels)
