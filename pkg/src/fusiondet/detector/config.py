"""Detector configuration and its ``key = value`` text form."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from ..geometry import BevGridSpec


@dataclass(frozen=True)
class ExtractorConfig:
    """Channel plan of the feature extractor; ``channels[i]`` is the width at 1/2**i resolution."""

    channels: tuple = (32, 64, 128, 256)

    def __post_init__(self):
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ValueError("channel plan needs four positive widths")


@dataclass(frozen=True)
class DetectorConfig:
    # inputs
    x_range: tuple = (0.0, 70.4)
    y_range: tuple = (-40.0, 40.0)
    z_range: tuple = (-2.5, 0.5)
    resolution: float = 0.1
    n_slices: int = 5
    image_size: tuple = (360, 1200)
    scale: float = 1.0
    # network
    channels: tuple = (32, 64, 128, 256)
    fc_units: tuple = (256, 256)
    roi_size: int = 7
    head_gain: float = 0.1
    dtype: str = "float32"
    # anchors
    anchor_dims: tuple = ()  # flat (l, w, l, w, ...); empty means cluster from labels
    anchor_clusters: int = 2
    anchor_stride: float = 0.5
    anchor_height: float = 1.65
    # RPN
    rpn_pos_iou: float = 0.6
    rpn_neg_iou: float = 0.4
    rpn_batch: int = 512
    rpn_nms: float = 0.7
    rpn_top_k_train: int = 1024
    rpn_top_k_infer: int = 300
    # detection head
    dh_iou: float = 0.7
    dh_batch: int = 64
    dh_nms: float = 0.01
    gt_jitter: int = 4
    max_detections: int = 100
    # schedule
    iterations: int = 120000
    lr: float = 1e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 20000
    checkpoint_every: int = 20000
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.scale <= 1:
            raise ValueError("scale must be in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if len(self.anchor_dims) % 2:
            raise ValueError("anchor_dims needs (l, w) pairs")
        ExtractorConfig(self.channels)

    # derived views -------------------------------------------------------

    @property
    def extractor(self) -> ExtractorConfig:
        return ExtractorConfig(tuple(self.channels))

    @property
    def grid(self) -> BevGridSpec:
        """BEV grid after scaling: x keeps its origin, y stays centred."""
        s = self.scale
        x0, x1 = self.x_range
        y0, y1 = self.y_range
        yc = 0.5 * (y0 + y1)
        return BevGridSpec(x_range=(x0, x0 + s * (x1 - x0)),
                           y_range=(yc - 0.5 * s * (y1 - y0), yc + 0.5 * s * (y1 - y0)),
                           z_range=tuple(self.z_range), resolution=self.resolution,
                           n_slices=self.n_slices)

    @property
    def input_image_size(self):
        return (int(round(self.image_size[0] * self.scale)), int(round(self.image_size[1] * self.scale)))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def dims_array(self):
        return np.asarray(self.anchor_dims, dtype=np.float64).reshape(-1, 2)

    def with_(self, **changes) -> "DetectorConfig":
        return replace(self, **changes)


_TUPLES = {f.name for f in fields(DetectorConfig) if f.type == "tuple"}
_TYPES = {f.name: f.type for f in fields(DetectorConfig)}


def _coerce(key, raw: str):
    kind = _TYPES[key]
    if key in _TUPLES:
        parts = [p for p in raw.replace(";", ",").replace(" ", ",").split(",") if p]
        if key in ("channels", "fc_units", "image_size"):
            return tuple(int(p) for p in parts)
        return tuple(float(p) for p in parts)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def parse_config(text: str, base: DetectorConfig | None = None) -> DetectorConfig:
    """Read ``key = value`` lines (``#`` comments allowed) over ``base``."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    cp.read_string("[detector]\n" + text)
    changes = {}
    for key, raw in cp["detector"].items():
        if key not in _TYPES:
            raise ValueError(f"unknown config key {key!r}")
        try:
            changes[key] = _coerce(key, raw)
        except ValueError:
            raise ValueError(f"bad value for {key}: {raw!r}") from None
    return replace(base or DetectorConfig(), **changes)


def load_config(path, base: DetectorConfig | None = None) -> DetectorConfig:
    with open(path) as f:
        return parse_config(f.read(), base)


def format_config(cfg: DetectorConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
