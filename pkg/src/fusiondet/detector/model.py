"""Two-view detector: feature branches, ROI fusion, RPN and detection head."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..box_codec import decode_array
from ..geometry import Box3D, bev_rects, image_rects, rect_to_window
from ..nn import Dense, Probe, roi_pool, softmax
from ..overlap import nms
from .config import DetectorConfig
from .extractor import ViewBranch

log = logging.getLogger(__name__)


@dataclass
class Proposal:
    box: Box3D
    objectness: float


@dataclass
class Detection:
    box: Box3D
    score: float
    class_name: str = "Car"


# ---------------------------------------------------------------- ROI projection

@dataclass
class RoiSet:
    """Per-box pooling windows in both views plus per-view validity."""

    boxes: np.ndarray  # (R, 7)
    img_windows: np.ndarray  # (R, 4) rows follow image v
    img_ok: np.ndarray
    bev_windows: np.ndarray  # (R, 4) rows follow x
    bev_ok: np.ndarray

    def __len__(self):
        return len(self.boxes)

    @property
    def usable(self):
        return self.img_ok | self.bev_ok

    def subset(self, idx) -> "RoiSet":
        return RoiSet(self.boxes[idx], self.img_windows[idx], self.img_ok[idx],
                      self.bev_windows[idx], self.bev_ok[idx])


def _nonempty(w):
    return (w[:, 2] > w[:, 0]) & (w[:, 3] > w[:, 1])


def project_rois(boxes, calib, image_size, grid) -> RoiSet:
    """Project 3D boxes to integer windows on the full-resolution maps of both views."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    ir, vis = image_rects(b, calib, image_size)
    iw = rect_to_window(ir, rows_axis="v")
    br, inside = bev_rects(b, grid)
    bw = rect_to_window(br, rows_axis="u")
    return RoiSet(b, iw, vis & _nonempty(iw), bw, inside & _nonempty(bw))


def merge_views(v_img, img_idx, v_bev, bev_idx, n, tape=None, name=None):
    """Element-wise mean of the two pooled vectors per ROI.

    ``v_img`` holds the ROIs listed in ``img_idx`` (likewise for BEV). ROIs seen in
    one view only take that view's vector unchanged.
    """
    if isinstance(v_img, Probe):
        return v_img.derive(name, (n, v_img.shape[1]))
    count = np.zeros(n)
    count[img_idx] += 1
    count[bev_idx] += 1
    if (count == 0).any():
        raise ValueError("every ROI needs at least one valid view")
    dtype = v_img.dtype
    w = (1.0 / count).astype(dtype)
    wi, wb = w[img_idx, None], w[bev_idx, None]
    out = np.zeros((n, v_img.shape[1]), dtype=dtype)
    out[img_idx] += wi * v_img
    out[bev_idx] += wb * v_bev
    if tape is None:
        return out
    return tape.push(out, (v_img, v_bev), lambda g: (wi * g[img_idx], wb * g[bev_idx]))


def pool_and_fuse(rois: RoiSet, map_img, map_bev, P=7, tape=None, name="fusion"):
    """Pool every usable ROI in both views and average; returns ``(vectors, kept_idx)``.

    ROIs with no valid window in either view are dropped (logged).
    """
    if map_img.shape[3] != map_bev.shape[3]:
        raise ValueError("image and BEV maps must have the same channel count")
    keep = np.flatnonzero(rois.usable)
    if len(keep) < len(rois):
        log.info("%s: dropped %d ROIs invisible in both views", name, len(rois) - len(keep))
    r = rois.subset(keep)
    img_idx = np.flatnonzero(r.img_ok)
    bev_idx = np.flatnonzero(r.bev_ok)
    v_img = roi_pool(map_img, r.img_windows[img_idx], P, tape, f"{name}/image-roi")
    v_bev = roi_pool(map_bev, r.bev_windows[bev_idx], P, tape, f"{name}/bev-roi")
    return merge_views(v_img, img_idx, v_bev, bev_idx, len(keep), tape, name), keep


# ---------------------------------------------------------------- heads

class FusionHead:
    """FC trunk then a 2-way softmax and a box-delta regression output."""

    def __init__(self, prefix, nin, fc_units, n_deltas, rng, dtype=np.float64, gain=1.0):
        self.trunk = []
        for i, units in enumerate(fc_units):
            self.trunk.append(Dense(f"{prefix}/fc{i + 1}", nin, units, rng=rng, dtype=dtype))
            nin = units
        self.cls = Dense(f"{prefix}/cls", nin, 2, relu=False, rng=rng, dtype=dtype, gain=gain)
        self.reg = Dense(f"{prefix}/reg", nin, n_deltas, relu=False, rng=rng, dtype=dtype, gain=gain)

    def params(self):
        layers = self.trunk + [self.cls, self.reg]
        return [p for l in layers for p in l.params()]

    def __call__(self, v, tape=None):
        h = v
        for layer in self.trunk:
            h = layer(h, tape)
        return softmax(self.cls(h, tape), tape, self.cls.name + ".softmax"), self.reg(h, tape)


# ---------------------------------------------------------------- detector

@dataclass
class ViewMaps:
    img_fused: object
    img_one: object
    bev_fused: object
    bev_one: object


@dataclass
class HeadOutput:
    rois: RoiSet  # usable ROIs only, in head order
    probs: np.ndarray  # (R, 2)
    deltas: np.ndarray


class Detector:
    def __init__(self, cfg: DetectorConfig, seed=None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        dtype = cfg.np_dtype
        ch = tuple(cfg.channels)
        self.image_branch = ViewBranch("image", 3, ch, rng, dtype)
        self.bev_branch = ViewBranch("bev", cfg.n_slices + 1, ch, rng, dtype)
        P = cfg.roi_size
        self.rpn = FusionHead("rpn", P * P, cfg.fc_units, 6, rng, dtype, cfg.head_gain)
        self.dh = FusionHead("dh", P * P * ch[0], cfg.fc_units, 7, rng, dtype, cfg.head_gain)

    def params(self):
        return (self.image_branch.params() + self.bev_branch.params()
                + self.rpn.params() + self.dh.params())

    # -- stages ---------------------------------------------------------------

    def features(self, image, bev, tape=None) -> ViewMaps:
        img_fused, img_one = self.image_branch(image, tape)
        bev_fused, bev_one = self.bev_branch(bev, tape)
        return ViewMaps(img_fused, img_one, bev_fused, bev_one)

    def rpn_forward(self, maps: ViewMaps, rois: RoiSet, tape=None) -> HeadOutput:
        v, keep = pool_and_fuse(rois, maps.img_one, maps.bev_one, self.cfg.roi_size, tape, "rpn")
        probs, deltas = self.rpn(v, tape)
        return HeadOutput(rois.subset(keep), probs, deltas)

    def dh_forward(self, maps: ViewMaps, rois: RoiSet, tape=None) -> HeadOutput:
        v, keep = pool_and_fuse(rois, maps.img_fused, maps.bev_fused, self.cfg.roi_size, tape, "dh")
        probs, deltas = self.dh(v, tape)
        return HeadOutput(rois.subset(keep), probs, deltas)

    def select_proposals(self, out: HeadOutput, top_k):
        """Decode RPN output, suppress at the RPN threshold, keep the top ``top_k``.

        Decoded proposals keep their anchor's yaw of 0 or pi/2, so axis-aligned
        footprint IoU equals the rotated one here.
        """
        if len(out.rois) == 0:
            return np.zeros((0, 7)), np.zeros(0)
        boxes = decode_array(out.rois.boxes, out.deltas, "rpn")
        scores = np.asarray(out.probs[:, 1], dtype=np.float64)
        keep = nms(boxes, scores, self.cfg.rpn_nms, "aligned", max_keep=top_k)
        return boxes[keep], scores[keep]

    def select_detections(self, out: HeadOutput):
        if len(out.rois) == 0:
            return np.zeros((0, 7)), np.zeros(0)
        boxes = decode_array(out.rois.boxes, out.deltas, "dh")
        scores = np.asarray(out.probs[:, 1], dtype=np.float64)
        keep = nms(boxes, scores, self.cfg.dh_nms, "bev", max_keep=self.cfg.max_detections)
        return boxes[keep], scores[keep]

    # -- inference ------------------------------------------------------------

    def infer(self, frame):
        """Run both stages on a prepared frame; returns ``(proposals, detections)``."""
        cfg = self.cfg
        maps = self.features(frame.image, frame.bev)
        rois = project_rois(frame.anchors, frame.input_calib, frame.input_size, cfg.grid)
        p_boxes, p_scores = self.select_proposals(self.rpn_forward(maps, rois), cfg.rpn_top_k_infer)
        proposals = [Proposal(Box3D.from_array(b), float(s)) for b, s in zip(p_boxes, p_scores)]
        if not len(p_boxes):
            return proposals, []
        prois = project_rois(p_boxes, frame.input_calib, frame.input_size, cfg.grid)
        d_boxes, d_scores = self.select_detections(self.dh_forward(maps, prois))
        detections = [Detection(Box3D.from_array(b), float(s)) for b, s in zip(d_boxes, d_scores)]
        return proposals, detections

    # -- shapes ---------------------------------------------------------------

    def dry_run(self, image_hw=None, bev_hw=None, n_rois=1):
        """Shape-only pass; returns the ``[(layer name, shape), ...]`` log."""
        cfg = self.cfg
        image_hw = image_hw or cfg.input_image_size
        bev_hw = bev_hw or (cfg.grid.height, cfg.grid.width)
        trace = []
        image = Probe((1, *image_hw, 3), trace)
        bev = Probe((1, *bev_hw, cfg.n_slices + 1), trace)
        maps = self.features(image, bev)
        for head, a, b in (("rpn", maps.img_one, maps.bev_one), ("dh", maps.img_fused, maps.bev_fused)):
            vi = roi_pool(a, np.zeros((n_rois, 4)), cfg.roi_size, None, f"{head}/image-roi")
            vb = roi_pool(b, np.zeros((n_rois, 4)), cfg.roi_size, None, f"{head}/bev-roi")
            v = merge_views(vi, np.arange(n_rois), vb, np.arange(n_rois), n_rois, None,
                            f"{head}/Element-wise-Mean")
            getattr(self, head)(v)
        return trace
