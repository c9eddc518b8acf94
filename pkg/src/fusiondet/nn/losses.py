"""Classification and box-regression losses; each returns ``(value, grad)``."""

from __future__ import annotations

import numpy as np

BCE_EPS = 1e-7


def loss_bce(p, y, eps=BCE_EPS):
    """Mean binary cross-entropy and its gradient w.r.t. ``p``.

    ``p`` is clamped to ``[eps, 1 - eps]``; the gradient is zero where clamping bites.
    """
    p = np.asarray(p)
    y = np.asarray(y, dtype=p.dtype)
    n = max(1, p.size)
    pc = np.clip(p, eps, 1 - eps)
    value = -np.sum(y * np.log(pc) + (1 - y) * np.log(1 - pc)) / n
    inside = (p >= eps) & (p <= 1 - eps)
    grad = -(y / pc - (1 - y) / (1 - pc)) / n * inside
    return float(value), grad


def smooth_l1(e):
    a = np.abs(e)
    return np.where(a < 1, 0.5 * e * e, a - 0.5)


def loss_smooth_l1(pred, target, n_norm=None):
    """Smooth-L1 summed over elements and divided by ``n_norm`` (default: rows)."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if n_norm is None:
        n_norm = pred.shape[0] if pred.ndim > 1 else 1
    n_norm = max(1, n_norm)
    e = pred - target
    value = float(smooth_l1(e).sum() / n_norm)
    grad = np.where(np.abs(e) < 1, e, np.sign(e)) / n_norm
    return value, grad
