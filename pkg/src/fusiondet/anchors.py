"""Car anchor sizes, the ground-plane anchor lattice, and empty-anchor filtering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kitti_io import GroundTruthObject
from .geometry import BevGridSpec, bev_rects, plane_to_lidar, rect_to_window


class DegenerateClusters(ValueError):
    pass


class UnusablePlane(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSet:
    anchors: np.ndarray  # (N, 7) boxes, yaw in {0, pi/2}
    stride: float
    source_dims: np.ndarray  # (k, 2) of (l, w)

    def __len__(self):
        return len(self.anchors)

    def subset(self, mask) -> "AnchorSet":
        return AnchorSet(self.anchors[mask], self.stride, self.source_dims)


def cluster_dimensions(objects, k: int, seed: int = 0, max_iter: int = 100,
                       tol: float = 1e-6) -> np.ndarray:
    """k-means over (l, w) with k-means++ seeding; centroids sorted by length."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(objects) == 0:
        raise DegenerateClusters("no samples to cluster")
    if isinstance(objects[0], GroundTruthObject):
        X = np.array([[o.l, o.w] for o in objects], dtype=np.float64)
    else:
        X = np.asarray(objects, dtype=np.float64).reshape(-1, 2)
    if len(np.unique(X, axis=0)) < k:
        raise DegenerateClusters(f"fewer than {k} distinct samples")

    rng = np.random.default_rng(seed)
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, k):
        d2 = ((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1).min(axis=1)
        centers.append(X[rng.choice(len(X), p=d2 / d2.sum())])
    centers = np.array(centers)

    for _ in range(max_iter):
        labels = ((X[:, None, :] - centers[None]) ** 2).sum(-1).argmin(axis=1)
        new = np.array([X[labels == c].mean(axis=0) if np.any(labels == c) else centers[c]
                        for c in range(k)])
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    return centers[np.argsort(centers[:, 0], kind="stable")]


def lattice(lo: float, hi: float, stride: float) -> np.ndarray:
    """Points ``lo + k * stride`` up to ``hi``, including ``hi`` if it lands exactly."""
    n = int(np.floor((hi - lo) / stride + 1e-9)) + 1
    return lo + stride * np.arange(n)


def ground_z(plane_lidar: np.ndarray, x, y):
    a, b, c, d = plane_lidar
    if abs(c) < 1e-6 * np.linalg.norm(plane_lidar[:3]):
        raise UnusablePlane("ground plane normal has no vertical component in the LIDAR frame")
    return -(a * x + b * y + d) / c


def generate_anchors(grid: BevGridSpec, dims, plane, calib=None, h: float = 1.65,
                     stride: float = 0.5) -> AnchorSet:
    """Anchors on the ground plane, ordered by x, then y, then size, then rotation."""
    if not stride > 0:
        raise ValueError("stride must be positive")
    dims = np.asarray(dims, dtype=np.float64).reshape(-1, 2)
    xs = lattice(grid.x_range[0], grid.x_range[1], stride)
    ys = lattice(grid.y_range[0], grid.y_range[1], stride)
    pl = plane_to_lidar(plane, calib)
    k = len(dims)
    X, Y, K, R = np.meshgrid(xs, ys, np.arange(k), np.arange(2), indexing="ij")
    X, Y, K, R = X.ravel(), Y.ravel(), K.ravel(), R.ravel()
    Z = ground_z(pl, X, Y) + h / 2
    anchors = np.column_stack([X, Y, Z, dims[K, 0], dims[K, 1], np.full(X.shape, h),
                               R * (np.pi / 2)])
    return AnchorSet(anchors, stride, dims)


def occupied_windows(windows: np.ndarray, occupancy: np.ndarray) -> np.ndarray:
    """True where a half-open cell window contains an occupied cell (summed-area table)."""
    H, W = occupancy.shape
    sat = np.zeros((H + 1, W + 1), dtype=np.int64)
    sat[1:, 1:] = occupancy.astype(np.int64).cumsum(0).cumsum(1)
    r0 = np.clip(windows[:, 0], 0, H)
    c0 = np.clip(windows[:, 1], 0, W)
    r1 = np.clip(windows[:, 2], 0, H)
    c1 = np.clip(windows[:, 3], 0, W)
    total = sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0]
    return (total > 0) & (r1 > r0) & (c1 > c0)


def filter_empty_anchors(a: AnchorSet, bev) -> AnchorSet:
    """Keep anchors whose BEV rect covers at least one cell with points."""
    if len(a) == 0:
        return a
    rects, inside = bev_rects(a.anchors, bev.grid)
    windows = rect_to_window(rects, rows_axis="u")
    keep = inside & occupied_windows(windows, bev.density > 0)
    return a.subset(keep)


def format_dims(dims, class_name="Car") -> str:
    dims = np.asarray(dims).reshape(-1, 2)
    return "".join(f"{class_name} {i} {l:.6f} {w:.6f}\n" for i, (l, w) in enumerate(dims))


def parse_dims(text: str, class_name="Car") -> np.ndarray:
    rows = []
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 4 and parts[0] == class_name:
            rows.append((int(parts[1]), float(parts[2]), float(parts[3])))
    if not rows:
        raise ValueError(f"no {class_name} dimensions found")
    rows.sort()
    return np.array([[l, w] for _, l, w in rows])
