"""Minimal channel-last tensor engine for the fusion detector."""

from .core import Param, Probe, Tape, record_switches, replay_switches
from .gradcheck import check_gradients
from .layers import (
    Conv2D,
    ConvTranspose2D,
    Dense,
    DegenerateRoi,
    ShapeError,
    bilinear_upsample2x,
    concat_channels,
    conv2d,
    conv2d_transpose,
    crop_to,
    elementwise_fuse,
    fully_connected,
    max_pool2d,
    relu,
    roi_pool,
    softmax,
)
from .losses import loss_bce, loss_smooth_l1
from .optim import AdamState, adam_step, exponential_decay

__all__ = [
    "AdamState", "Conv2D", "ConvTranspose2D", "Dense", "DegenerateRoi", "Param", "Probe",
    "ShapeError", "Tape", "adam_step", "bilinear_upsample2x", "check_gradients",
    "concat_channels", "conv2d", "conv2d_transpose", "crop_to", "elementwise_fuse",
    "exponential_decay", "fully_connected", "loss_bce", "loss_smooth_l1", "max_pool2d",
    "record_switches", "relu", "replay_switches", "roi_pool", "softmax",
]
