"""Three-stage feature extractor and the per-view multi-level fusion.

Each view (image or BEV) gets its own weights. Stage 1 is a trimmed VGG
(four sets of two 3x3 convs, three poolings), the deconvolution stage climbs
back to full resolution with lateral concatenations, and stage 2 re-descends
to produce full, half and quarter resolution outputs. Odd map sizes are
handled by ceil-mode pooling and cropping after every 2x upsample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..nn import (
    Conv2D,
    ConvTranspose2D,
    ShapeError,
    bilinear_upsample2x,
    concat_channels,
    crop_to,
    elementwise_fuse,
    max_pool2d,
)

MIN_SIZE = 8


@dataclass
class PyramidFeatures:
    full: object
    half: object
    quarter: object


def _hw(x):
    return x.shape[1], x.shape[2]


class FeatureExtractor:
    def __init__(self, prefix, in_channels, channels, rng, dtype=np.float64):
        c1, c2, c3, c4 = channels
        kw = dict(rng=rng, dtype=dtype)
        L = lambda name, cin, cout: Conv2D(f"{prefix}/{name}", cin, cout, **kw)
        self.stage1 = [
            (L("Conv-1.1", in_channels, c1), L("Conv-1", c1, c1)),
            (L("Conv-2.1", c1, c2), L("Conv-2", c2, c2)),
            (L("Conv-3.1", c2, c3), L("Conv-3", c3, c3)),
            (L("Conv-4.1", c3, c4), L("Conv-4", c4, c4)),
        ]
        self.up1 = ConvTranspose2D(f"{prefix}/Upconv-1", c4, c3, **kw)
        self.up2 = ConvTranspose2D(f"{prefix}/Upconv-2", 2 * c3, c2, **kw)
        self.up3 = ConvTranspose2D(f"{prefix}/Upconv-3", 2 * c2, c1, **kw)
        self.conv5 = L("Conv-5", 2 * c1, c1)
        self.conv6 = L("Conv-6", c1 + 2 * c2, c2)
        self.conv7 = L("Conv-7", c2 + 2 * c3, c3)
        self.prefix = prefix

    def params(self):
        layers = [l for pair in self.stage1 for l in pair]
        layers += [self.up1, self.up2, self.up3, self.conv5, self.conv6, self.conv7]
        return [p for l in layers for p in l.params()]

    def __call__(self, x, tape=None) -> PyramidFeatures:
        H, W = _hw(x)
        if min(H, W) < MIN_SIZE:
            raise ShapeError(f"{self.prefix}: input {H}x{W} is smaller than {MIN_SIZE} pixels")
        p = self.prefix
        # stage 1
        skips = []
        h = x
        for i, (a, b) in enumerate(self.stage1):
            if i:
                h = max_pool2d(h, tape, f"{p}/Pool-{i}")
            h = b(a(h, tape), tape)
            skips.append(h)
        conv1, conv2, conv3, conv4 = skips

        # deconvolution stage
        u1 = crop_to(self.up1(conv4, tape), *_hw(conv3), tape, f"{p}/Upconv-1.crop")
        u2 = self.up2(concat_channels([u1, conv3], tape, f"{p}/Concat-U1"), tape)
        u2 = crop_to(u2, *_hw(conv2), tape, f"{p}/Upconv-2.crop")
        u3 = self.up3(concat_channels([u2, conv2], tape, f"{p}/Concat-U2"), tape)
        u3 = crop_to(u3, *_hw(conv1), tape, f"{p}/Upconv-3.crop")

        # stage 2
        full = self.conv5(concat_channels([u3, conv1], tape, f"{p}/Concat-5"), tape)
        h = max_pool2d(full, tape, f"{p}/Pool-5")
        half = self.conv6(concat_channels([h, conv2, u2], tape, f"{p}/Concat-6"), tape)
        h = max_pool2d(half, tape, f"{p}/Pool-6")
        quarter = self.conv7(concat_channels([h, conv3, u1], tape, f"{p}/Concat-7"), tape)
        return PyramidFeatures(full, half, quarter)


class MultiLevelFusion:
    """Quarter -> half -> full element-wise-max fusion, then the 1x1 reduction."""

    def __init__(self, prefix, channels, rng, dtype=np.float64):
        c1, c2, c3, _ = channels
        self.conv8 = Conv2D(f"{prefix}/Conv-8", c3, c2, rng=rng, dtype=dtype)
        self.conv9 = Conv2D(f"{prefix}/Conv-9", c2, c1, rng=rng, dtype=dtype)
        # linear 1x1 conv starting as the channel mean
        self.conv10 = Conv2D(f"{prefix}/Conv-10", c1, 1, k=1, relu=False, init="mean", dtype=dtype)
        self.prefix = prefix

    def params(self):
        return self.conv8.params() + self.conv9.params() + self.conv10.params()

    def fuse(self, pyr: PyramidFeatures, tape=None):
        p = self.prefix
        h = bilinear_upsample2x(pyr.quarter, tape, f"{p}/Bilinear-1")
        h = crop_to(h, *_hw(pyr.half), tape, f"{p}/Bilinear-1.crop")
        h = self.conv8(h, tape)
        h = elementwise_fuse(h, pyr.half, "max", tape, f"{p}/Element-wise-Max-1")
        h = bilinear_upsample2x(h, tape, f"{p}/Bilinear-2")
        h = crop_to(h, *_hw(pyr.full), tape, f"{p}/Bilinear-2.crop")
        h = self.conv9(h, tape)
        return elementwise_fuse(h, pyr.full, "max", tape, f"{p}/Element-wise-Max-2")

    def reduce(self, fused, tape=None):
        if fused.shape[3] != self.conv10.weight.shape[2]:
            raise ShapeError(f"{self.prefix}/Conv-10 expects {self.conv10.weight.shape[2]} channels")
        return self.conv10(fused, tape)


class ViewBranch:
    """Extractor plus multi-level fusion for one input view."""

    def __init__(self, prefix, in_channels, channels, rng, dtype=np.float64):
        self.extractor = FeatureExtractor(prefix, in_channels, channels, rng, dtype)
        self.fusion = MultiLevelFusion(prefix, channels, rng, dtype)

    def params(self):
        return self.extractor.params() + self.fusion.params()

    def __call__(self, x, tape=None):
        """Return ``(fused_full_res, one_channel_map)``."""
        fused = self.fusion.fuse(self.extractor(x, tape), tape)
        return fused, self.fusion.reduce(fused, tape)
