"""Box overlap measures, anchor/proposal target assignment and greedy NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Rect2D, as_box_array, footprint_bounds, footprints

POSITIVE, NEGATIVE, IGNORED = 1, 0, -1


# ---------------------------------------------------------------- axis-aligned

def iou_axis_aligned(a, b) -> float:
    a = a.as_tuple() if isinstance(a, Rect2D) else tuple(a)
    b = b.as_tuple() if isinstance(b, Rect2D) else tuple(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix_aligned(a, b) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` rects given as (u0, v0, u1, v1)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


# ---------------------------------------------------------------- rotated

def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise vertices)."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject, clip):
    """Sutherland-Hodgman clip of ``subject`` by the counter-clockwise convex ``clip``."""
    out = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    n = len(clip)
    for k in range(n):
        if not out:
            break
        ax, ay = clip[k]
        bx, by = clip[(k + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []
        m = len(inp)
        for i in range(m):
            px, py = inp[i]
            qx, qy = inp[(i + 1) % m]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0:
                out.append((px, py))
                if sq < 0:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
            elif sq >= 0:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def _footprint_intersection(pa, pb) -> float:
    inter = clip_convex(pa, pb)
    return max(polygon_area(inter), 0.0) if len(inter) >= 3 else 0.0


def iou_rotated_bev(a, b) -> float:
    ba, bb = as_box_array(a), as_box_array(b)
    area_a = ba[0, 3] * ba[0, 4]
    area_b = bb[0, 3] * bb[0, 4]
    fa, fb = footprints(ba)[0], footprints(bb)[0]
    # order the pair so iou(a, b) and iou(b, a) evaluate identical arithmetic
    if tuple(ba[0]) > tuple(bb[0]):
        fa, fb = fb, fa
    inter = _footprint_intersection(fa, fb)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def bev_intersection_matrix(a, b) -> np.ndarray:
    """Pairwise rotated-footprint intersection areas."""
    a, b = as_box_array(a), as_box_array(b)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ra, rb = footprint_bounds(a), footprint_bounds(b)
    touch = ((np.minimum(ra[:, None, 2], rb[None, :, 2]) > np.maximum(ra[:, None, 0], rb[None, :, 0]))
             & (np.minimum(ra[:, None, 3], rb[None, :, 3]) > np.maximum(ra[:, None, 1], rb[None, :, 1])))
    fa, fb = footprints(a), footprints(b)
    for i, j in zip(*np.nonzero(touch)):
        if tuple(a[i]) > tuple(b[j]):
            out[i, j] = _footprint_intersection(fb[j], fa[i])
        else:
            out[i, j] = _footprint_intersection(fa[i], fb[j])
    return out


def iou_matrix_bev(a, b) -> np.ndarray:
    a, b = as_box_array(a), as_box_array(b)
    inter = bev_intersection_matrix(a, b)
    union = (a[:, 3] * a[:, 4])[:, None] + (b[:, 3] * b[:, 4])[None, :] - inter
    return inter / union


def _z_overlap(a, b):
    lo = np.maximum(a[:, None, 2] - a[:, None, 5] / 2, b[None, :, 2] - b[None, :, 5] / 2)
    hi = np.minimum(a[:, None, 2] + a[:, None, 5] / 2, b[None, :, 2] + b[None, :, 5] / 2)
    return np.clip(hi - lo, 0, None)


def iou_matrix_3d(a, b) -> np.ndarray:
    a, b = as_box_array(a), as_box_array(b)
    inter = bev_intersection_matrix(a, b) * _z_overlap(a, b)
    vol_a = a[:, 3] * a[:, 4] * a[:, 5]
    vol_b = b[:, 3] * b[:, 4] * b[:, 5]
    return inter / (vol_a[:, None] + vol_b[None, :] - inter)


def iou_3d(a, b) -> float:
    return float(iou_matrix_3d(a, b)[0, 0])


def iou_matrix_bev_aligned(a, b) -> np.ndarray:
    """IoU of the axis-aligned bounds of each box footprint."""
    return iou_matrix_aligned(footprint_bounds(a), footprint_bounds(b))


IOU_MATRICES = {
    "aligned": iou_matrix_bev_aligned,
    "bev": iou_matrix_bev,
    "3d": iou_matrix_3d,
}


# ---------------------------------------------------------------- assignment

@dataclass(frozen=True)
class Assignment:
    label: int  # POSITIVE, NEGATIVE or IGNORED
    matched_gt_index: int | None
    max_iou: float


def assign_labels(iou: np.ndarray, pos_t: float, neg_t: float):
    """Vectorised assignment from an ``(anchors, gts)`` IoU matrix.

    Returns ``(labels, matched, max_iou)`` arrays.
    """
    if not 0 <= neg_t <= pos_t <= 1:
        raise ValueError("thresholds must satisfy 0 <= neg_t <= pos_t <= 1")
    n = iou.shape[0]
    if iou.shape[1] == 0:
        return np.full(n, NEGATIVE), np.full(n, -1), np.zeros(n)
    matched = iou.argmax(axis=1)
    max_iou = iou[np.arange(n), matched]
    labels = np.full(n, IGNORED)
    labels[max_iou < neg_t] = NEGATIVE
    labels[max_iou >= pos_t] = POSITIVE
    return labels, matched, max_iou


def assign_targets(anchors, gts, pos_t, neg_t, iou_fn="aligned") -> list[Assignment]:
    """Per-anchor label, best ground truth and its IoU.

    ``iou_fn`` is a name in :data:`IOU_MATRICES` or a callable on two box lists
    returning an IoU matrix.
    """
    fn = IOU_MATRICES[iou_fn] if isinstance(iou_fn, str) else iou_fn
    a, g = as_box_array(anchors), as_box_array(gts) if len(gts) else np.zeros((0, 7))
    iou = fn(a, g) if len(g) else np.zeros((len(a), 0))
    labels, matched, max_iou = assign_labels(iou, pos_t, neg_t)
    return [Assignment(int(lab), int(m) if len(g) else None, float(v))
            for lab, m, v in zip(labels, matched, max_iou)]


# ---------------------------------------------------------------- nms

def nms(boxes, scores, iou_threshold, iou_fn="bev", max_keep=None) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending score order.

    A box is dropped when its IoU with an already kept box exceeds
    ``iou_threshold``. Equal scores are ordered by original index.
    """
    fn = IOU_MATRICES[iou_fn] if isinstance(iou_fn, str) else iou_fn
    b = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if len(b) != len(scores):
        raise ValueError("boxes and scores differ in length")
    order = np.lexsort((np.arange(len(scores)), -scores))
    if fn is iou_matrix_bev_aligned:
        return _nms_rects(footprint_bounds(b), order, iou_threshold, max_keep)
    alive = np.ones(len(b), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[pos + 1:]
        rest = rest[alive[rest]]
        if len(rest):
            ious = fn(b[i:i + 1], b[rest])[0]
            alive[rest[ious > iou_threshold]] = False
    return np.array(keep, dtype=np.int64)


def _nms_rects(r, order, iou_threshold, max_keep):
    """Axis-aligned greedy NMS against every box at once.

    Suppressing already kept boxes is harmless: a kept box overlapping the
    current one beyond the threshold would have removed it first.
    """
    area = (r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1])
    alive = np.ones(len(r), dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        iw = np.minimum(r[i, 2], r[:, 2]) - np.maximum(r[i, 0], r[:, 0])
        ih = np.minimum(r[i, 3], r[:, 3]) - np.maximum(r[i, 1], r[:, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = area[i] + area - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            iou = np.where(union > 0, inter / union, 0.0)
        alive &= ~(iou > iou_threshold)
    return np.array(keep, dtype=np.int64)
