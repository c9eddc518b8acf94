"""KITTI-layout dataset access and per-frame network inputs.

Expected layout under the dataset root::

    image_2/<id>.png  velodyne/<id>.bin  calib/<id>.txt
    label_2/<id>.txt  (optional)  planes/<id>.txt  (optional)
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..anchors import filter_empty_anchors, generate_anchors
from ..bev import BevMaps, encode_bev
from ..geometry import camera_object_to_box
from ..kitti_io import (
    DEFAULT_PLANE,
    Calibration,
    GroundPlane,
    KittiFormatError,
    PointCloud,
    parse_ground_plane,
    read_labels,
    read_point_cloud,
    parse_calibration,
)
from .config import DetectorConfig


class FrameError(RuntimeError):
    """A frame could not be loaded; the message names the frame id."""


@dataclass
class RawFrame:
    frame_id: str
    image: np.ndarray  # (H, W, 3) uint8
    cloud: PointCloud
    calib: Calibration
    plane: GroundPlane
    labels: list


def read_split(path) -> list[str]:
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


class KittiDataset:
    def __init__(self, root, split=None):
        self.root = os.fspath(root)
        if split is None:
            names = sorted(os.listdir(os.path.join(self.root, "velodyne")))
            self.ids = [os.path.splitext(n)[0] for n in names if n.endswith(".bin")]
        elif isinstance(split, (list, tuple)):
            self.ids = list(split)
        else:
            self.ids = read_split(split)

    def __len__(self):
        return len(self.ids)

    def path(self, kind, frame_id, ext):
        return os.path.join(self.root, kind, f"{frame_id}.{ext}")

    def has_labels(self, frame_id):
        return os.path.exists(self.path("label_2", frame_id, "txt"))

    def labels(self, frame_id):
        try:
            return read_labels(self.path("label_2", frame_id, "txt"))
        except (OSError, KittiFormatError) as e:
            raise FrameError(f"frame {frame_id}: {e}") from e

    def load(self, frame_id) -> RawFrame:
        try:
            with Image.open(self.path("image_2", frame_id, "png")) as im:
                image = np.asarray(im.convert("RGB"))
            cloud = read_point_cloud(self.path("velodyne", frame_id, "bin"))
            with open(self.path("calib", frame_id, "txt")) as f:
                calib = parse_calibration(f.read())
            plane_path = self.path("planes", frame_id, "txt")
            if os.path.exists(plane_path):
                with open(plane_path) as f:
                    plane = parse_ground_plane(f.read())
            else:
                plane = GroundPlane(*DEFAULT_PLANE)
            labels = read_labels(self.path("label_2", frame_id, "txt")) if self.has_labels(frame_id) else []
        except (OSError, KittiFormatError) as e:
            raise FrameError(f"frame {frame_id}: {e}") from e
        return RawFrame(frame_id, image, cloud, calib, plane, labels)


def letterbox(image: np.ndarray, size):
    """Resize keeping aspect ratio, then zero-pad bottom/right to ``size``.

    Returns ``(float image in [0, 1], scale)``.
    """
    H, W = size
    h, w = image.shape[:2]
    s = min(H / h, W / w)
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    resized = np.asarray(Image.fromarray(image).resize((nw, nh), Image.BILINEAR), dtype=np.float32)
    out = np.zeros((H, W, 3), dtype=np.float32)
    out[:min(nh, H), :min(nw, W)] = resized[:H, :W] / 255.0
    return out, s


def scale_calibration(calib: Calibration, s: float) -> Calibration:
    p2 = calib.P2.copy()
    p2[:2] *= s
    return Calibration(p2, calib.R0_rect, calib.Tr_velo_to_cam, calib.extra)


@dataclass
class FrameInputs:
    """Everything the network and its targets need for one frame."""

    frame_id: str
    image: np.ndarray  # (1, H, W, 3)
    bev: np.ndarray  # (1, H, W, n_slices + 1)
    bev_maps: BevMaps
    calib: Calibration  # native camera
    input_calib: Calibration  # camera of the letterboxed image
    native_size: tuple
    input_size: tuple
    plane: GroundPlane
    labels: list
    gt_boxes: np.ndarray  # (G, 7) cars in the LIDAR frame, footprint touching the grid
    anchors: np.ndarray  # (A, 7) non-empty anchors


def car_boxes(labels, calib, grid, class_name="Car"):
    boxes = [camera_object_to_box(o, calib).as_array() for o in labels if o.class_name == class_name]
    boxes = np.array(boxes).reshape(-1, 7)
    if len(boxes):
        from ..geometry import bev_rects

        _, inside = bev_rects(boxes, grid)
        boxes = boxes[inside]
    return boxes


def prepare_frame(raw: RawFrame, cfg: DetectorConfig, dims) -> FrameInputs:
    grid = cfg.grid
    size = cfg.input_image_size
    image, s = letterbox(raw.image, size)
    bev = encode_bev(raw.cloud, grid)
    dtype = cfg.np_dtype
    anchors = generate_anchors(grid, dims, raw.plane, raw.calib, h=cfg.anchor_height,
                               stride=cfg.anchor_stride)
    anchors = filter_empty_anchors(anchors, bev).anchors
    return FrameInputs(
        frame_id=raw.frame_id,
        image=image[None].astype(dtype),
        bev=bev.channels[None].astype(dtype),
        bev_maps=bev,
        calib=raw.calib,
        input_calib=scale_calibration(raw.calib, s),
        native_size=tuple(raw.image.shape[:2]),
        input_size=size,
        plane=raw.plane,
        labels=raw.labels,
        gt_boxes=car_boxes(raw.labels, raw.calib, grid),
        anchors=anchors,
    )
