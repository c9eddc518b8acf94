"""Readers and writers for the KITTI object-detection file formats.

Velodyne ``.bin`` point clouds, ``calib`` text files, ``label_2`` object
labels, AVOD-style ``planes`` files, and detection output in the label
format with a trailing score column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PLANE = (0.0, -1.0, 0.0, 1.65)


class KittiFormatError(ValueError):
    """Raised when a KITTI file does not match its expected layout."""


@dataclass(frozen=True)
class PointCloud:
    """LIDAR returns as an ``(N, 4)`` float32 array of x, y, z, reflectance."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, 4)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def to_bytes(self) -> bytes:
        return self.points.astype("<f4").tobytes()


@dataclass(frozen=True)
class Calibration:
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name, shape in (("P2", (3, 4)), ("R0_rect", (3, 3)), ("Tr_velo_to_cam", (3, 4))):
            m = np.asarray(getattr(self, name), dtype=np.float64).reshape(shape)
            if not np.all(np.isfinite(m)):
                raise KittiFormatError(f"{name} has non-finite entries")
            object.__setattr__(self, name, m)
        r = self.R0_rect
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-3:
            raise KittiFormatError("R0_rect is not orthonormal")

    def velo_to_rect(self) -> np.ndarray:
        """4x4 homogeneous LIDAR -> rectified camera transform."""
        tr = np.eye(4)
        tr[:3, :4] = self.Tr_velo_to_cam
        r0 = np.eye(4)
        r0[:3, :3] = self.R0_rect
        return r0 @ tr

    def rect_to_velo(self) -> np.ndarray:
        return np.linalg.inv(self.velo_to_rect())

    def to_text(self) -> str:
        lines = []
        for key in ("P0", "P1"):
            if key in self.extra:
                lines.append(_fmt_key(key, self.extra[key]))
        lines.append(_fmt_key("P2", self.P2))
        if "P3" in self.extra:
            lines.append(_fmt_key("P3", self.extra["P3"]))
        lines.append(_fmt_key("R0_rect", self.R0_rect))
        lines.append(_fmt_key("Tr_velo_to_cam", self.Tr_velo_to_cam))
        for key, value in self.extra.items():
            if key not in ("P0", "P1", "P3"):
                lines.append(_fmt_key(key, value))
        return "\n".join(lines) + "\n"


def _fmt_key(key, m):
    return key + ": " + " ".join(f"{v:.12e}" for v in np.asarray(m).ravel())


@dataclass(frozen=True)
class GroundTruthObject:
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple
    dims: tuple  # (h, w, l)
    location: tuple  # (x, y, z), bottom centre in the rectified camera frame
    rotation_y: float
    score: float | None = None

    @property
    def h(self):
        return self.dims[0]

    @property
    def w(self):
        return self.dims[1]

    @property
    def l(self):
        return self.dims[2]

    @property
    def bbox_height(self):
        return self.bbox2d[3] - self.bbox2d[1]


@dataclass(frozen=True)
class GroundPlane:
    a: float
    b: float
    c: float
    d: float

    def normalized(self) -> "GroundPlane":
        """Unit normal with b < 0, so the normal points up in the camera frame."""
        n = math.sqrt(self.a**2 + self.b**2 + self.c**2)
        if not n > 1e-12:
            raise KittiFormatError("degenerate ground plane")
        s = -1.0 / n if self.b > 0 else 1.0 / n
        return GroundPlane(self.a * s, self.b * s, self.c * s, self.d * s)

    def as_array(self):
        return np.array([self.a, self.b, self.c, self.d])


def parse_point_cloud(raw: bytes) -> PointCloud:
    if len(raw) % 16:
        raise KittiFormatError(f"point cloud byte length {len(raw)} is not a multiple of 16")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise KittiFormatError(f"non-finite value in point record {int(np.argmax(bad))}")
    return PointCloud(pts.astype(np.float32))


def read_point_cloud(path) -> PointCloud:
    with open(path, "rb") as f:
        return parse_point_cloud(f.read())


_CALIB_SIZES = {"P0": 12, "P1": 12, "P2": 12, "P3": 12, "R0_rect": 9, "Tr_velo_to_cam": 12,
                "Tr_imu_to_velo": 12}


def parse_calibration(text: str) -> Calibration:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or ":" not in line:
            continue
        key, rest = line.split(":", 1)
        key = key.strip()
        try:
            nums = [float(v) for v in rest.split()]
        except ValueError as e:
            raise KittiFormatError(f"calib line {lineno}: {e}") from None
        want = _CALIB_SIZES.get(key)
        if want is not None and len(nums) != want:
            raise KittiFormatError(f"calib key {key}: expected {want} values, got {len(nums)}")
        values[key] = np.array(nums)
    for key in ("P2", "R0_rect", "Tr_velo_to_cam"):
        if key not in values:
            raise KittiFormatError(f"calib missing key {key}")
    extra = {k: v for k, v in values.items() if k not in ("P2", "R0_rect", "Tr_velo_to_cam")}
    return Calibration(values["P2"], values["R0_rect"], values["Tr_velo_to_cam"], extra)


def parse_labels(text: str) -> list[GroundTruthObject]:
    """Parse label lines. A 16th column, when present, is read as a score."""
    objects = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise KittiFormatError(f"label line {lineno}: expected 15 fields, got {len(fields)}")
        try:
            nums = [float(v) for v in fields[1:]]
        except ValueError as e:
            raise KittiFormatError(f"label line {lineno}: {e}") from None
        left, top, right, bottom = nums[3:7]
        if right < left or bottom < top:
            raise KittiFormatError(f"label line {lineno}: inverted 2D box")
        objects.append(GroundTruthObject(
            class_name=fields[0],
            truncation=nums[0],
            occlusion=int(nums[1]),
            alpha=nums[2],
            bbox2d=(left, top, right, bottom),
            dims=(nums[7], nums[8], nums[9]),
            location=(nums[10], nums[11], nums[12]),
            rotation_y=nums[13],
            score=nums[14] if len(nums) == 15 else None,
        ))
    return objects


def read_labels(path) -> list[GroundTruthObject]:
    with open(path) as f:
        return parse_labels(f.read())


def format_object(obj: GroundTruthObject) -> str:
    vals = [obj.truncation, obj.occlusion, obj.alpha, *obj.bbox2d, *obj.dims,
            *obj.location, obj.rotation_y]
    if not all(math.isfinite(v) for v in vals) or (obj.score is not None and not math.isfinite(obj.score)):
        raise KittiFormatError(f"non-finite field in {obj.class_name} object")
    line = (f"{obj.class_name} {obj.truncation:.4f} {int(obj.occlusion)} {obj.alpha:.6f} "
            + " ".join(f"{v:.4f}" for v in obj.bbox2d) + " "
            + " ".join(f"{v:.6f}" for v in obj.dims) + " "
            + " ".join(f"{v:.6f}" for v in obj.location) + f" {obj.rotation_y:.6f}")
    if obj.score is not None:
        line += f" {obj.score:.6f}"
    return line


def format_labels(objects) -> str:
    return "".join(format_object(o) + "\n" for o in objects)


def write_detections(detections, calib: Calibration, image_size=(375, 1242)) -> str:
    """Serialize LIDAR-frame detections as KITTI label lines with a score column."""
    from .geometry import box_to_camera_object

    lines = []
    for det in detections:
        obj = box_to_camera_object(det.box, calib, image_size, class_name=det.class_name,
                                   score=det.score)
        lines.append(format_object(obj))
    return "".join(line + "\n" for line in lines)


def parse_ground_plane(text: str) -> GroundPlane:
    nums = []
    for line in text.splitlines():
        parts = line.split()
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            continue
        if len(vals) >= 4:
            nums = vals[:4]
    if len(nums) < 4:
        raise KittiFormatError("ground plane file has fewer than 4 coefficients")
    return GroundPlane(*nums).normalized()


def format_ground_plane(plane: GroundPlane) -> str:
    return "# Plane\nWidth 4\nHeight 1\n" + " ".join(f"{v:.6e}" for v in plane.as_array()) + "\n"
