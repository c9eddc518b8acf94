"""Two-stage camera + LIDAR vehicle detector built on :mod:`fusiondet.nn`."""

from .config import DetectorConfig, ExtractorConfig, format_config, load_config, parse_config
from .data import FrameError, FrameInputs, KittiDataset, RawFrame, letterbox, prepare_frame
from .extractor import FeatureExtractor, MultiLevelFusion, PyramidFeatures, ViewBranch
from .model import Detection, Detector, Proposal, RoiSet, merge_views, pool_and_fuse, project_rois
from .training import Trainer, moving_average

__all__ = [
    "Detection", "Detector", "DetectorConfig", "ExtractorConfig", "FeatureExtractor",
    "FrameError", "FrameInputs", "KittiDataset", "MultiLevelFusion", "Proposal",
    "PyramidFeatures", "RawFrame", "RoiSet", "Trainer", "ViewBranch", "format_config",
    "letterbox", "load_config", "merge_views", "moving_average", "parse_config",
    "pool_and_fuse", "prepare_frame", "project_rois",
]
