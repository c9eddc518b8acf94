"""KITTI-style average precision for cars in BEV and 3D.

Ground truths are binned by 2D box height, occlusion and truncation using the
public KITTI thresholds. A detection is a true positive when it matches an
unmatched eligible car at IoU >= 0.7; detections landing on cars outside the
current bin, on vans, or inside ``DontCare`` regions are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import as_box_array, camera_object_to_box
from .overlap import iou_matrix_3d, iou_matrix_bev

BIN_ORDER = ("easy", "moderate", "hard")


@dataclass(frozen=True)
class DifficultyBin:
    name: str
    min_bbox_height: float
    max_occlusion: int
    max_truncation: float

    def admits(self, obj) -> bool:
        return (obj.bbox_height >= self.min_bbox_height
                and obj.occlusion <= self.max_occlusion
                and obj.truncation <= self.max_truncation)


BINS = {
    "easy": DifficultyBin("easy", 40, 0, 0.15),
    "moderate": DifficultyBin("moderate", 25, 1, 0.30),
    "hard": DifficultyBin("hard", 25, 2, 0.50),
}


@dataclass(frozen=True)
class PRSample:
    threshold: float
    precision: float
    recall: float


def assign_difficulty(gt) -> str:
    for name in BIN_ORDER:
        if BINS[name].admits(gt):
            return name
    return "ignored"


def _bin_of(name) -> DifficultyBin:
    return BINS[name] if isinstance(name, str) else name


def match_frame(det_boxes, det_scores, gts, iou_fn, iou_threshold=0.7, bin="moderate",
                det_bboxes2d=None, class_name="Car"):
    """Greedy matching of score-sorted detections against one frame's labels.

    Returns ``(flags, gt_matched, n_eligible)`` where ``flags`` is +1 for a true
    positive, 0 for a false positive and -1 for an ignored detection.
    """
    b = _bin_of(bin)
    dets = as_box_array(det_boxes)
    scores = np.asarray(det_scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if np.any(order != np.arange(len(order))):
        raise ValueError("detections must be sorted by descending score")

    cars = [g for g in gts if g.class_name == class_name]
    eligible = np.array([b.admits(g) for g in cars], dtype=bool)
    neighbours = [g for g in gts if g.class_name == "Van"]
    dontcare = [g for g in gts if g.class_name == "DontCare"]

    fn = {"bev": iou_matrix_bev, "3d": iou_matrix_3d}.get(iou_fn, iou_fn)
    gt_boxes = np.array([camera_object_to_box(g).as_array() for g in cars]).reshape(-1, 7)
    iou = fn(dets, gt_boxes) if len(dets) and len(cars) else np.zeros((len(dets), len(cars)))
    nb_boxes = np.array([camera_object_to_box(g).as_array() for g in neighbours]).reshape(-1, 7)
    iou_nb = (fn(dets, nb_boxes) if len(dets) and len(neighbours)
              else np.zeros((len(dets), len(neighbours))))

    matched = np.zeros(len(cars), dtype=bool)
    flags = np.zeros(len(dets), dtype=np.int64)
    for d in range(len(dets)):
        cand = np.where(eligible & ~matched & (iou[d] >= iou_threshold))[0]
        if len(cand):
            g = cand[np.argmax(iou[d, cand])]
            matched[g] = True
            flags[d] = 1
            continue
        hits_other = np.any(~eligible & (iou[d] >= iou_threshold)) if len(cars) else False
        hits_van = np.any(iou_nb[d] >= iou_threshold) if len(neighbours) else False
        in_dontcare = (det_bboxes2d is not None and len(dontcare)
                       and _inside_dontcare(det_bboxes2d[d], dontcare))
        flags[d] = -1 if (hits_other or hits_van or in_dontcare) else 0
    return flags, matched, int(eligible.sum())


def _inside_dontcare(bbox, dontcare, min_overlap=0.5) -> bool:
    l, t, r, btm = bbox
    area = max(r - l, 0) * max(btm - t, 0)
    if area <= 0:
        return False
    for dc in dontcare:
        dl, dt, dr, db = dc.bbox2d
        iw = min(r, dr) - max(l, dl)
        ih = min(btm, db) - max(t, dt)
        if iw > 0 and ih > 0 and iw * ih / area >= min_overlap:
            return True
    return False


def pr_curve(scores, flags, n_gt) -> list[PRSample]:
    """Precision/recall after admitting every detection scoring >= each distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags)
    keep = flags >= 0
    scores, tp = scores[keep], flags[keep] == 1
    if len(scores) == 0 or n_gt == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    ctp = np.cumsum(tp)
    last = np.r_[scores[1:] != scores[:-1], True]
    idx = np.nonzero(last)[0]
    return [PRSample(float(scores[i]), float(ctp[i] / (i + 1)), float(ctp[i] / n_gt))
            for i in idx]


def average_precision(samples, mode="R11") -> float:
    if mode == "R11":
        anchors = np.linspace(0.0, 1.0, 11)
    elif mode == "R40":
        anchors = np.linspace(1.0 / 40, 1.0, 40)
    else:
        raise ValueError(f"unknown AP mode {mode!r}")
    if not samples:
        return 0.0
    rec = np.array([s.recall for s in samples])
    prec = np.array([s.precision for s in samples])
    total = 0.0
    for r in anchors:
        ok = rec >= r - 1e-12
        total += prec[ok].max() if ok.any() else 0.0
    return total / len(anchors)


@dataclass
class FrameDetections:
    boxes: np.ndarray  # (N, 7) in the canonical evaluation frame
    scores: np.ndarray
    bboxes2d: np.ndarray | None = None


def detections_from_labels(objects, class_name="Car") -> FrameDetections:
    dets = [o for o in objects if o.class_name == class_name]
    boxes = np.array([camera_object_to_box(o).as_array() for o in dets]).reshape(-1, 7)
    scores = np.array([1.0 if o.score is None else o.score for o in dets])
    bboxes = np.array([o.bbox2d for o in dets]).reshape(-1, 4)
    return FrameDetections(boxes, scores, bboxes)


def evaluate(dets, gts, metric="bev", mode="R11", iou_threshold=0.7) -> dict:
    """AP per difficulty bin. ``dets`` and ``gts`` map frame id to per-frame data.

    Detections are :class:`FrameDetections` or label-object lists; ground truths
    are label-object lists.
    """
    missing = sorted(set(gts) ^ set(dets))
    if missing:
        raise KeyError(f"frames missing from detections or ground truth: {', '.join(map(str, missing))}")
    fn = {"bev": iou_matrix_bev, "3d": iou_matrix_3d}[metric]
    frames = sorted(gts)
    prepared = {}
    for f in frames:
        d = dets[f]
        if not isinstance(d, FrameDetections):
            d = detections_from_labels(d)
        order = np.argsort(-d.scores, kind="stable")
        prepared[f] = FrameDetections(d.boxes[order], d.scores[order],
                                      None if d.bboxes2d is None else d.bboxes2d[order])
    out = {}
    for name in BIN_ORDER:
        all_scores, all_flags, n_gt = [], [], 0
        for f in frames:
            d = prepared[f]
            flags, _, n = match_frame(d.boxes, d.scores, gts[f], fn, iou_threshold, name,
                                      d.bboxes2d)
            all_scores.append(d.scores)
            all_flags.append(flags)
            n_gt += n
        samples = pr_curve(np.concatenate(all_scores) if all_scores else [],
                           np.concatenate(all_flags) if all_flags else [], n_gt)
        out[name] = average_precision(samples, mode)
    return out


def format_table(results: dict) -> str:
    """Aligned text table; ``results`` maps metric name to a per-bin AP dict."""
    lines = [f"{'metric':<8}" + "".join(f"{b:>10}" for b in BIN_ORDER)]
    for metric, aps in results.items():
        lines.append(f"{metric:<8}" + "".join(f"{100 * aps[b]:>10.2f}" for b in BIN_ORDER))
    return "\n".join(lines)


def format_csv(results: dict) -> str:
    rows = ["metric,bin,ap"]
    for metric, aps in results.items():
        rows.extend(f"{metric},{b},{aps[b]:.6f}" for b in BIN_ORDER)
    return "\n".join(rows) + "\n"
