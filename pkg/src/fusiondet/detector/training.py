"""Target assignment, losses and the single-frame training loop."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

import numpy as np

from ..box_codec import encode_array
from ..nn import AdamState, Tape, adam_step, checkpoint, exponential_decay, loss_bce, loss_smooth_l1
from ..nn.core import switch
from ..overlap import (IGNORED, NEGATIVE, POSITIVE, assign_labels, iou_matrix_bev,
                       iou_matrix_bev_aligned)
from .config import DetectorConfig, format_config
from .data import FrameInputs
from .model import Detector, RoiSet, project_rois

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "frame", "lr", "rpn_cls", "rpn_reg", "dh_cls", "dh_reg", "total",
              "rpn_pos", "dh_pos", "note")


@dataclass
class LossTerms:
    rpn_cls: float = 0.0
    rpn_reg: float = 0.0
    dh_cls: float = 0.0
    dh_reg: float = 0.0
    rpn_pos: int = 0
    dh_pos: int = 0

    @property
    def total(self):
        return self.rpn_cls + self.rpn_reg + self.dh_cls + self.dh_reg


@dataclass
class RpnTargets:
    rois: RoiSet  # usable anchors
    labels: np.ndarray
    deltas: np.ndarray  # (A, 6), meaningful on positives


def rpn_targets(frame: FrameInputs, cfg: DetectorConfig) -> RpnTargets:
    rois = project_rois(frame.anchors, frame.input_calib, frame.input_size, cfg.grid)
    rois = rois.subset(np.flatnonzero(rois.usable))
    gts = frame.gt_boxes
    iou = iou_matrix_bev_aligned(rois.boxes, gts) if len(gts) else np.zeros((len(rois), 0))
    labels, matched, _ = assign_labels(iou, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
    deltas = np.zeros((len(rois), 6))
    pos = labels == POSITIVE
    if pos.any():
        deltas[pos] = encode_array(rois.boxes[pos], gts[matched[pos]], "rpn")
    return RpnTargets(rois, labels, deltas)


def sample_minibatch(labels, batch, rng):
    """Up to ``batch / 2`` positives, the rest negatives; sorted indices."""
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(len(pos), batch // 2)
    n_neg = min(len(neg), batch - n_pos)
    pick = np.concatenate([rng.choice(pos, n_pos, replace=False),
                           rng.choice(neg, n_neg, replace=False)])
    return np.sort(pick).astype(np.int64)


def snap_yaw(yaw):
    """Nearest of the two anchor orientations, 0 or pi/2 (modulo pi)."""
    return np.where(np.abs(np.cos(yaw)) >= np.abs(np.sin(yaw)), 0.0, np.pi / 2)


def gt_proposals(gts, n_jitter, rng):
    """Anchor-like copies of the ground truth plus randomly jittered ones."""
    if len(gts) == 0:
        return np.zeros((0, 7))
    base = gts.copy()
    base[:, 6] = snap_yaw(gts[:, 6])
    out = [base]
    for _ in range(n_jitter):
        j = base.copy()
        j[:, 0:2] += rng.normal(0, 0.25, (len(gts), 2))
        j[:, 2] += rng.normal(0, 0.1, len(gts))
        j[:, 3:6] *= np.exp(rng.normal(0, 0.08, (len(gts), 3)))
        out.append(j)
    return np.concatenate(out)


def dh_regression_targets(proposals, gts):
    """DH deltas with the gt yaw taken modulo pi nearest to the proposal yaw.

    A box and its half-turn share the same footprint, so this keeps the yaw
    delta within (-pi/2, pi/2].
    """
    t = encode_array(proposals, gts, "dh")
    t[:, 6] = -(np.mod(-t[:, 6] + np.pi / 2, np.pi) - np.pi / 2)
    return t


def _head_loss(probs, deltas, labels, targets):
    """BCE over labelled rows and Smooth-L1 over positive rows, plus the tape seeds.

    Rows labelled IGNORED contribute nothing.
    """
    rows = labels != IGNORED
    pos = labels == POSITIVE
    gp = np.zeros_like(probs)
    gd = np.zeros_like(deltas)
    cls = 0.0
    if rows.any():
        cls, gp[rows, 1] = loss_bce(probs[rows, 1], pos[rows])
    n_pos = int(pos.sum())
    reg = 0.0
    if n_pos:
        reg, gd[pos] = loss_smooth_l1(deltas[pos], targets[pos], n_pos)
    return cls, reg, n_pos, [(probs, gp), (deltas, gd)]


class Trainer:
    """Owns the model parameters and the Adam state for one training run."""

    def __init__(self, model: Detector, frames, cfg: DetectorConfig | None = None, out_dir=None):
        self.model = model
        self.cfg = cfg or model.cfg
        self.frames = list(frames)
        if not self.frames:
            raise ValueError("training needs at least one frame")
        self.targets = [rpn_targets(f, self.cfg) for f in self.frames]
        self.params = model.params()
        self.adam = AdamState(lr=self.cfg.lr)
        self.rng = np.random.default_rng(self.cfg.seed + 1)
        self.iteration = 0
        self.out_dir = out_dir
        self._order = []
        self.history = []

    def lr(self, it):
        c = self.cfg
        return exponential_decay(it, c.lr, c.lr_decay, c.lr_decay_every)

    def _next_frame(self):
        if not self._order:
            self._order = list(self.rng.permutation(len(self.frames)))
        return self._order.pop(0)

    def compute(self, k, tape=None, rng=None):
        """Forward pass and losses on frame ``k``; returns ``(LossTerms, seeds)``.

        ``rng`` drives minibatch sampling and jitter (default: the run's generator).
        """
        cfg, model, frame, tgt = self.cfg, self.model, self.frames[k], self.targets[k]
        rng = self.rng if rng is None else rng
        terms = LossTerms()
        maps = model.features(frame.image, frame.bev, tape)

        # RPN over every usable anchor; only the sampled rows carry loss
        rpn = model.rpn_forward(maps, tgt.rois, tape)
        pick = sample_minibatch(tgt.labels, cfg.rpn_batch, rng)
        labels = np.full(len(tgt.rois), IGNORED)
        labels[pick] = tgt.labels[pick]
        cls, reg, n_pos, seeds = _head_loss(rpn.probs, rpn.deltas, labels, tgt.deltas)
        terms.rpn_cls, terms.rpn_reg, terms.rpn_pos = cls, reg, n_pos

        # detection head on proposals plus ground-truth-derived boxes
        props, _ = model.select_proposals(rpn, cfg.rpn_top_k_train)
        gts = frame.gt_boxes
        # proposals are constants for the loss; the switch pins them during gradient checks
        cand = switch(np.concatenate([props, gt_proposals(gts, cfg.gt_jitter, rng)]))
        rois = project_rois(cand, frame.input_calib, frame.input_size, cfg.grid)
        rois = rois.subset(np.flatnonzero(rois.usable))
        iou = iou_matrix_bev(rois.boxes, gts) if len(gts) else np.zeros((len(rois), 0))
        dlabels, matched, _ = assign_labels(iou, cfg.dh_iou, cfg.dh_iou)
        pick = sample_minibatch(dlabels, cfg.dh_batch, rng)
        if len(pick):
            rois = rois.subset(pick)
            dlabels = dlabels[pick]
            dtargets = np.zeros((len(pick), 7))
            dpos = dlabels == POSITIVE
            if dpos.any():
                dtargets[dpos] = dh_regression_targets(rois.boxes[dpos], gts[matched[pick][dpos]])
            dh = model.dh_forward(maps, rois, tape)
            cls, reg, n_pos, dseeds = _head_loss(dh.probs, dh.deltas, dlabels, dtargets)
            seeds += dseeds
            terms.dh_cls, terms.dh_reg, terms.dh_pos = cls, reg, n_pos
        return terms, seeds

    def step(self):
        """One Adam update on the next frame of the shuffled cycle."""
        k = self._next_frame()
        for p in self.params:
            p.zero_grad()
        tape = Tape()
        terms, seeds = self.compute(k, tape)
        tape.backward(seeds)
        lr = self.lr(self.iteration)
        adam_step(self.adam, self.params, lr=lr)
        self.iteration += 1
        note = "no-positives" if terms.rpn_pos == 0 or terms.dh_pos == 0 else ""
        if note:
            log.warning("iteration %d frame %s: %s", self.iteration, self.frames[k].frame_id, note)
        row = dict(iteration=self.iteration, frame=self.frames[k].frame_id, lr=lr,
                   rpn_cls=terms.rpn_cls, rpn_reg=terms.rpn_reg, dh_cls=terms.dh_cls,
                   dh_reg=terms.dh_reg, total=terms.total, rpn_pos=terms.rpn_pos,
                   dh_pos=terms.dh_pos, note=note)
        self.history.append(row)
        return row

    def save(self, path):
        meta = {"iteration": self.iteration, "seed": self.cfg.seed,
                "channels": ",".join(str(c) for c in self.cfg.channels)}
        if self.cfg.anchor_dims:
            meta["anchor_dims"] = ",".join(repr(float(v)) for v in self.cfg.anchor_dims)
        checkpoint.save(path, self.params, meta)

    def run(self, iterations=None, progress=None):
        """Train for ``iterations`` steps, writing the loss log and checkpoints to ``out_dir``."""
        n = self.cfg.iterations if iterations is None else iterations
        writer = None
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            with open(os.path.join(self.out_dir, "config.txt"), "w") as f:
                f.write(format_config(self.cfg))
            fh = open(os.path.join(self.out_dir, "loss_log.csv"), "w", newline="")
            writer = csv.DictWriter(fh, LOG_FIELDS)
            writer.writeheader()
        try:
            for _ in range(n):
                row = self.step()
                if writer:
                    writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
                if progress:
                    progress(row)
                every = self.cfg.checkpoint_every
                if self.out_dir and every and self.iteration % every == 0:
                    self.save(os.path.join(self.out_dir, f"iter_{self.iteration:06d}.ckpt"))
        finally:
            if writer:
                fh.close()
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "final.ckpt"))
        return self.history


def moving_average(values, window):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([])
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
