"""Procedural KITTI-layout scenes: boxes on a flat ground, surface points, flat-shaded images.

Used for overfit experiments and tests; every scene is a pure function of the seed.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image, ImageDraw

from .geometry import Box3D, box_to_camera_object, corners_array, lidar_to_image
from .kitti_io import Calibration, GroundPlane, PointCloud, format_ground_plane, format_labels
from .overlap import iou_matrix_bev

NATIVE_SIZE = (375, 1242)
CAMERA_HEIGHT = 1.65
# camera = (-y, -z, x) for a LIDAR point (x, y, z)
AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def synthetic_calibration() -> Calibration:
    p2 = np.array([[721.5377, 0.0, 609.5593, 44.857],
                   [0.0, 721.5377, 172.854, 0.0],
                   [0.0, 0.0, 1.0, 0.0]])
    return Calibration(p2, np.eye(3), np.hstack([AXES, np.zeros((3, 1))]))


def sample_cars(rng, n, x_span=(7.0, 15.5), lattice=0.5, yaw_jitter=0.08):
    """Non-overlapping cars near lattice points, yaw close to 0 or pi/2 (either heading)."""
    boxes = []
    for _ in range(200 * n):
        if len(boxes) == n:
            break
        x = round(rng.uniform(*x_span) / lattice) * lattice + rng.uniform(-0.1, 0.1)
        half_fov = 0.55 * x
        y = round(rng.uniform(-half_fov, half_fov) / lattice) * lattice + rng.uniform(-0.1, 0.1)
        l, w, h = rng.uniform(3.7, 4.1), rng.uniform(1.55, 1.7), rng.uniform(1.45, 1.6)
        yaw = rng.choice([0.0, np.pi / 2, np.pi, -np.pi / 2]) + rng.uniform(-yaw_jitter, yaw_jitter)
        b = np.array([x, y, -CAMERA_HEIGHT + h / 2, l, w, h, yaw])
        grown = b.copy()
        grown[3:5] += 1.0
        if boxes and iou_matrix_bev(grown[None], np.array(boxes)).max() > 0:
            continue
        boxes.append(b)
    return np.array(boxes).reshape(-1, 7)


def _inside_footprint(xy, box):
    c, s = np.cos(box[6]), np.sin(box[6])
    d = xy - box[:2]
    lx = d[:, 0] * c + d[:, 1] * s
    ly = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(lx) <= box[3] / 2) & (np.abs(ly) <= box[4] / 2)


def surface_points(box, n, rng):
    """Points spread over the five outer faces (no bottom) of a box, with light noise."""
    l, w, h = box[3:6]
    areas = np.array([l * w, l * h, l * h, w * h, w * h])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u, v = rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n)
    local = np.empty((n, 3))
    top = face == 0
    local[top] = np.column_stack([u[top] * l, v[top] * w, np.full(top.sum(), h / 2)])
    for f, sign in ((1, 1), (2, -1)):
        m = face == f
        local[m] = np.column_stack([u[m] * l, np.full(m.sum(), sign * w / 2), v[m] * h])
    for f, sign in ((3, 1), (4, -1)):
        m = face == f
        local[m] = np.column_stack([np.full(m.sum(), sign * l / 2), u[m] * w, v[m] * h])
    local += rng.normal(0, 0.01, local.shape)
    c, s = np.cos(box[6]), np.sin(box[6])
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return local @ rot.T + box[:3]


def scene_cloud(boxes, rng, n_ground=6000, n_car=600, x_max=20.0, y_max=12.0):
    ground = np.column_stack([rng.uniform(0.5, x_max, n_ground), rng.uniform(-y_max, y_max, n_ground),
                              rng.normal(-CAMERA_HEIGHT, 0.01, n_ground)])
    keep = np.ones(n_ground, dtype=bool)
    for b in boxes:
        keep &= ~_inside_footprint(ground[:, :2], b)
    parts = [ground[keep]] + [surface_points(b, n_car, rng) for b in boxes]
    xyz = np.concatenate(parts)
    refl = rng.uniform(0, 1, (len(xyz), 1))
    return PointCloud(np.hstack([xyz, refl]).astype(np.float32))


def render_image(boxes, calib, rng, size=NATIVE_SIZE):
    """Sky/ground backdrop plus flat-shaded projected boxes drawn far to near."""
    H, W = size
    horizon = int(calib.P2[1, 2])
    img = np.empty((H, W, 3), dtype=np.float64)
    img[:horizon] = (150, 170, 190)
    img[horizon:] = (90, 90, 85)
    img += rng.normal(0, 6, img.shape)
    im = Image.fromarray(np.clip(img, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(im)
    order = np.argsort(-np.hypot(boxes[:, 0], boxes[:, 1])) if len(boxes) else []
    for i in order:
        corners = corners_array(boxes[i:i + 1])[0]
        uvd, front = lidar_to_image(corners, calib)
        if not front.all():
            continue
        uv = uvd[:, :2]
        color = tuple(int(c) for c in rng.integers(60, 230, 3))
        bottom, top = uv[:4], uv[4:]
        for a, b in ((0, 1), (1, 2), (2, 3), (3, 0)):
            quad = [tuple(bottom[a]), tuple(bottom[b]), tuple(top[b]), tuple(top[a])]
            draw.polygon(quad, fill=tuple(int(0.8 * c) for c in color))
        draw.polygon([tuple(p) for p in top], fill=color)
    return np.asarray(im)


def make_scene(rng, calib, n_cars):
    boxes = sample_cars(rng, n_cars)
    cloud = scene_cloud(boxes, rng)
    image = render_image(boxes, calib, rng)
    labels = [box_to_camera_object(Box3D.from_array(b), calib, NATIVE_SIZE) for b in boxes]
    return boxes, cloud, image, labels


def write_dataset(root, n_frames=8, seed=0, cars_per_frame=(1, 3)):
    """Write a KITTI-layout dataset plus ``train.txt``; returns the frame ids."""
    rng = np.random.default_rng(seed)
    calib = synthetic_calibration()
    plane = GroundPlane(0.0, -1.0, 0.0, CAMERA_HEIGHT)
    for sub in ("image_2", "velodyne", "calib", "label_2", "planes"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    ids = []
    for i in range(n_frames):
        fid = f"{i:06d}"
        n = int(rng.integers(cars_per_frame[0], cars_per_frame[1] + 1))
        _, cloud, image, labels = make_scene(rng, calib, n)
        Image.fromarray(image).save(os.path.join(root, "image_2", fid + ".png"))
        with open(os.path.join(root, "velodyne", fid + ".bin"), "wb") as f:
            f.write(cloud.to_bytes())
        with open(os.path.join(root, "calib", fid + ".txt"), "w") as f:
            f.write(calib.to_text())
        with open(os.path.join(root, "label_2", fid + ".txt"), "w") as f:
            f.write(format_labels(labels))
        with open(os.path.join(root, "planes", fid + ".txt"), "w") as f:
            f.write(format_ground_plane(plane))
        ids.append(fid)
    with open(os.path.join(root, "train.txt"), "w") as f:
        f.write("".join(i + "\n" for i in ids))
    return ids
