"""Anchor-relative regression targets and their inverse.

Centre offsets in x and y are scaled by the anchor's footprint diagonal, the
z offset by the anchor height, sizes are log ratios, and in ``"dh"`` mode the
yaw difference is appended (wrapped into (-pi, pi]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box3D, as_box_array, wrap_angle

MODES = ("rpn", "dh")


@dataclass(frozen=True)
class RegressionTarget:
    dx: float
    dy: float
    dz: float
    dl: float
    dw: float
    dh: float
    dtheta: float | None = None

    def as_array(self) -> np.ndarray:
        vals = [self.dx, self.dy, self.dz, self.dl, self.dw, self.dh]
        if self.dtheta is not None:
            vals.append(self.dtheta)
        return np.array(vals)

    @classmethod
    def from_array(cls, a) -> "RegressionTarget":
        a = [float(v) for v in np.asarray(a).ravel()]
        return cls(*a[:6], a[6] if len(a) > 6 else None)


def anchor_diagonal(anchor) -> float:
    if isinstance(anchor, Box3D):
        return float(np.hypot(anchor.l, anchor.w))
    a = np.asarray(anchor, dtype=np.float64)
    return np.hypot(a[..., 3], a[..., 4])


def _check_mode(mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def encode_array(anchors, gts, mode="rpn") -> np.ndarray:
    _check_mode(mode)
    a = as_box_array(anchors)
    g = as_box_array(gts)
    d = anchor_diagonal(a)
    cols = [
        (g[:, 0] - a[:, 0]) / d,
        (g[:, 1] - a[:, 1]) / d,
        (g[:, 2] - a[:, 2]) / a[:, 5],
        np.log(g[:, 3] / a[:, 3]),
        np.log(g[:, 4] / a[:, 4]),
        np.log(g[:, 5] / a[:, 5]),
    ]
    if mode == "dh":
        cols.append(wrap_angle(g[:, 6] - a[:, 6]))
    return np.column_stack(cols)


def decode_array(anchors, targets, mode="rpn") -> np.ndarray:
    _check_mode(mode)
    a = as_box_array(anchors)
    t = np.asarray(targets, dtype=np.float64).reshape(len(a), -1)
    d = anchor_diagonal(a)
    out = np.empty((len(a), 7))
    out[:, 0] = a[:, 0] + t[:, 0] * d
    out[:, 1] = a[:, 1] + t[:, 1] * d
    out[:, 2] = a[:, 2] + t[:, 2] * a[:, 5]
    out[:, 3:6] = a[:, 3:6] * np.exp(t[:, 3:6])
    if mode == "dh":
        out[:, 6] = wrap_angle(a[:, 6] + t[:, 6])
    else:
        out[:, 6] = a[:, 6]
    return out


def encode(anchor: Box3D, gt: Box3D, mode="rpn") -> RegressionTarget:
    return RegressionTarget.from_array(encode_array(anchor, gt, mode)[0])


def decode(anchor: Box3D, target: RegressionTarget, mode="rpn") -> Box3D:
    t = target.as_array()
    if mode == "dh" and len(t) < 7:
        t = np.append(t, 0.0)
    return Box3D.from_array(decode_array(anchor, t[None], mode)[0])
