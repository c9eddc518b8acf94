"""Scoring a detector on prepared frames: proposal recall and KITTI-style AP."""

from __future__ import annotations

import numpy as np

from ..eval_ap import evaluate
from ..kitti_io import parse_labels, write_detections
from ..overlap import iou_matrix_bev
from .model import Detector


def proposal_recall(proposals, gt_boxes, iou_threshold=0.5):
    """Fraction of ground-truth boxes covered by some proposal at rotated BEV IoU."""
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    if len(gts) == 0:
        return 1.0, 0
    boxes = np.array([p.box.as_array() for p in proposals]).reshape(-1, 7)
    if len(boxes) == 0:
        return 0.0, len(gts)
    hit = iou_matrix_bev(boxes, gts).max(axis=0) >= iou_threshold
    return float(hit.mean()), len(gts)


def detections_to_labels(detections, frame):
    """Label objects of LIDAR-frame detections, expressed through the native camera."""
    text = write_detections(detections, frame.calib, frame.native_size)
    return parse_labels(text)


def run_inference(model: Detector, frames):
    """``{frame_id: (proposals, detections)}`` for prepared frames."""
    return {f.frame_id: model.infer(f) for f in frames}


def score_frames(model: Detector, frames, rpn_iou=0.5, outputs=None):
    """RPN recall over all frames plus BEV and 3D AP of the detections."""
    outputs = outputs or run_inference(model, frames)
    hits = total = 0
    dets, gts = {}, {}
    for f in frames:
        proposals, detections = outputs[f.frame_id]
        r, n = proposal_recall(proposals, f.gt_boxes, rpn_iou)
        hits += r * n
        total += n
        dets[f.frame_id] = detections_to_labels(detections, f)
        gts[f.frame_id] = f.labels
    return {
        "rpn_recall": hits / total if total else 1.0,
        "bev": evaluate(dets, gts, "bev"),
        "3d": evaluate(dets, gts, "3d"),
    }
