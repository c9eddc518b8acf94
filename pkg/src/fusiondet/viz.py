"""Top-down PNG rendering: BEV density in gray with box footprints drawn over it."""

from __future__ import annotations

import io

import numpy as np
from PIL import Image, ImageDraw

from .bev import BevMaps
from .geometry import footprints

GT_COLOR = (255, 0, 0)
DET_COLOR = (0, 255, 0)


def to_pixels(xy, grid):
    """LIDAR (x, y) to image (column, row) with x pointing up and y pointing left."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    col = (grid.y_range[1] - xy[:, 1]) / grid.resolution
    row = (grid.x_range[1] - xy[:, 0]) / grid.resolution
    return np.column_stack([col, row])


def density_image(bev: BevMaps) -> np.ndarray:
    """``(H, W, 3)`` uint8 gray image of the density channel, far range at the top."""
    g = np.round(np.clip(bev.density, 0, 1) * 255).astype(np.uint8)[::-1, ::-1]
    return np.repeat(g[:, :, None], 3, axis=2)


def draw_footprints(image: Image.Image, boxes, grid, color):
    draw = ImageDraw.Draw(image)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    for poly in footprints(boxes) if len(boxes) else []:
        pts = [tuple(p) for p in to_pixels(poly, grid)]
        draw.line(pts + pts[:1], fill=color, width=1)


def render_bev(bev: BevMaps, gt_boxes=(), det_boxes=()) -> np.ndarray:
    """Ground truth in red, detections in green (drawn last, so on top)."""
    im = Image.fromarray(density_image(bev), "RGB")
    draw_footprints(im, gt_boxes, bev.grid, GT_COLOR)
    draw_footprints(im, det_boxes, bev.grid, DET_COLOR)
    return np.asarray(im)


def png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(path, rgb: np.ndarray):
    with open(path, "wb") as f:
        f.write(png_bytes(rgb))
