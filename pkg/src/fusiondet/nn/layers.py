"""Forward/backward kernels for the detector's layer vocabulary.

Tensors are ``(N, H, W, C)`` channel-last arrays. Every op accepts an optional
``tape``; with one, it registers its backward closure. Ops also accept a
:class:`~fusiondet.nn.core.Probe` and then only propagate shapes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Param, Probe, he_uniform, switch


class ShapeError(ValueError):
    pass


class DegenerateRoi(ValueError):
    pass


def _val(p):
    return p.value if isinstance(p, Param) else p


def _add_grad(p, g):
    if isinstance(p, Param):
        p.grad += g


def _relu(out):
    mask = switch(out > 0)
    return out * mask, mask


# ---------------------------------------------------------------- im2col helpers

def _pads(k, pad):
    if pad == "same":
        lo = (k - 1) // 2
        return lo, k - 1 - lo
    if pad == "valid":
        return 0, 0
    return int(pad), int(pad)


def _im2col(xp, kh, kw, s, Ho, Wo):
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s][:, :Ho, :Wo]
    N, C = xp.shape[0], xp.shape[3]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(N * Ho * Wo, kh * kw * C)


def _col2im(cols, padded_shape, kh, kw, s, Ho, Wo):
    N, Hp, Wp, C = padded_shape
    cols = cols.reshape(N, Ho, Wo, kh, kw, C)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, a:a + s * (Ho - 1) + 1:s, b:b + s * (Wo - 1) + 1:s, :] += cols[:, :, :, a, b, :]
    return out


# ---------------------------------------------------------------- convolution

def conv2d(x, kernel, bias=None, stride=1, pad="same", relu=False, tape=None, name=None):
    """Cross-correlation with zero padding; kernel is ``(kh, kw, Cin, Cout)``."""
    w = _val(kernel)
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"{name or 'conv2d'}: input has {x.shape[3]} channels, kernel expects {cin}")
    pt, pb = _pads(kh, pad)
    pl, pr = _pads(kw, pad)
    N, H, W, _ = x.shape
    Ho = (H + pt + pb - kh) // stride + 1
    Wo = (W + pl + pr - kw) // stride + 1
    if isinstance(x, Probe):
        return x.derive(name, (N, Ho, Wo, cout))

    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    wmat = w.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(N, Ho, Wo, cout)
    if bias is not None:
        out += _val(bias)
    mask = None
    if relu:
        out, mask = _relu(out)
    if tape is None:
        return out

    def backward(g):
        if mask is not None:
            g = g * mask
        g2 = g.reshape(-1, cout)
        _add_grad(kernel, (cols.T @ g2).reshape(w.shape))
        if bias is not None:
            _add_grad(bias, g2.sum(axis=0))
        if stride == 1:
            # input gradient = correlation of g with the flipped, transposed kernel
            gp = np.pad(g, ((0, 0), (kh - 1 - pt, kh - 1 - pb), (kw - 1 - pl, kw - 1 - pr), (0, 0)))
            wflip = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
            return ((_im2col(gp, kh, kw, 1, H, W) @ wflip).reshape(N, H, W, cin),)
        dxp = _col2im(g2 @ wmat.T, xp.shape, kh, kw, stride, Ho, Wo)
        return (dxp[:, pt:pt + H, pl:pl + W, :],)

    return tape.push(out, (x,), backward)


def conv2d_transpose(x, kernel, bias=None, stride=2, pad=1, relu=False, tape=None, name=None):
    """Transposed convolution; kernel is ``(kh, kw, Cout, Cin)``.

    This is the adjoint of :func:`conv2d` with the same kernel, stride and padding,
    so ``k=4, stride=2, pad=1`` exactly doubles H and W.
    """
    w = _val(kernel)
    kh, kw, cout, cin = w.shape
    if x.shape[3] != cin:
        raise ShapeError(f"{name or 'conv2d_transpose'}: input has {x.shape[3]} channels, kernel expects {cin}")
    N, H, W, _ = x.shape
    Hp, Wp = (H - 1) * stride + kh, (W - 1) * stride + kw
    Ho, Wo = Hp - 2 * pad, Wp - 2 * pad
    if isinstance(x, Probe):
        return x.derive(name, (N, Ho, Wo, cout))

    kmat = w.transpose(3, 0, 1, 2).reshape(cin, kh * kw * cout)
    x2 = x.reshape(-1, cin)
    outp = _col2im(x2 @ kmat, (N, Hp, Wp, cout), kh, kw, stride, H, W)
    out = np.ascontiguousarray(outp[:, pad:pad + Ho, pad:pad + Wo, :])
    if bias is not None:
        out += _val(bias)
    mask = None
    if relu:
        out, mask = _relu(out)
    if tape is None:
        return out

    def backward(g):
        if mask is not None:
            g = g * mask
        if bias is not None:
            _add_grad(bias, g.reshape(-1, cout).sum(axis=0))
        gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        gcols = _im2col(gp, kh, kw, stride, H, W)
        _add_grad(kernel, (x2.T @ gcols).reshape(cin, kh, kw, cout).transpose(1, 2, 3, 0))
        return ((gcols @ kmat.T).reshape(x.shape),)

    return tape.push(out, (x,), backward)


def fully_connected(x, weight, bias=None, relu=False, tape=None, name=None):
    w = _val(weight)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"{name or 'fully_connected'}: input width {x.shape[-1]} != {w.shape[0]}")
    if isinstance(x, Probe):
        return x.derive(name, (*x.shape[:-1], w.shape[1]))
    out = x @ w
    if bias is not None:
        out = out + _val(bias)
    mask = None
    if relu:
        out, mask = _relu(out)
    if tape is None:
        return out

    def backward(g):
        if mask is not None:
            g = g * mask
        _add_grad(weight, x.T @ g)
        if bias is not None:
            _add_grad(bias, g.sum(axis=0))
        return (g @ w.T,)

    return tape.push(out, (x,), backward)


# ---------------------------------------------------------------- layer objects

class Conv2D:
    def __init__(self, name, cin, cout, k=3, stride=1, pad="same", relu=True, rng=None,
                 dtype=np.float64, init="he"):
        self.name, self.stride, self.pad, self.relu = name, stride, pad, relu
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "mean":
            w = np.full((k, k, cin, cout), 1.0 / (k * k * cin), dtype=dtype)
        else:
            w = he_uniform(rng, (k, k, cin, cout), k * k * cin, dtype)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(cout, dtype=dtype))

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x, tape=None):
        return conv2d(x, self.weight, self.bias, self.stride, self.pad, self.relu, tape, self.name)


class ConvTranspose2D:
    def __init__(self, name, cin, cout, k=4, stride=2, pad=1, relu=True, rng=None,
                 dtype=np.float64):
        self.name, self.stride, self.pad, self.relu = name, stride, pad, relu
        rng = rng if rng is not None else np.random.default_rng(0)
        # fan-in of a stride-2 transposed conv: each output sees (k/stride)^2 * cin taps
        fan_in = max(1, (k // stride) ** 2 * cin)
        self.weight = Param(f"{name}.weight", he_uniform(rng, (k, k, cout, cin), fan_in, dtype))
        self.bias = Param(f"{name}.bias", np.zeros(cout, dtype=dtype))

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x, tape=None):
        return conv2d_transpose(x, self.weight, self.bias, self.stride, self.pad, self.relu,
                                tape, self.name)


class Dense:
    def __init__(self, name, nin, nout, relu=True, rng=None, dtype=np.float64, gain=1.0):
        self.name, self.relu = name, relu
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(f"{name}.weight", he_uniform(rng, (nin, nout), nin, dtype, gain))
        self.bias = Param(f"{name}.bias", np.zeros(nout, dtype=dtype))

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x, tape=None):
        return fully_connected(x, self.weight, self.bias, self.relu, tape, self.name)


# ---------------------------------------------------------------- pooling and resampling

def max_pool2d(x, tape=None, name=None):
    """2x2 max pooling with stride 2. Odd H or W is first padded by replicating
    the last row/column, so the output is ``ceil(H/2) x ceil(W/2)``."""
    N, H, W, C = x.shape
    H2, W2 = (H + 1) // 2, (W + 1) // 2
    if isinstance(x, Probe):
        return x.derive(name, (N, H2, W2, C))
    ph, pw = 2 * H2 - H, 2 * W2 - W
    xp = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="edge") if (ph or pw) else x
    xr = xp.reshape(N, H2, 2, W2, 2, C).transpose(0, 1, 3, 2, 4, 5).reshape(N, H2, W2, 4, C)
    idx = switch(xr.argmax(axis=3))
    out = np.take_along_axis(xr, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    if tape is None:
        return out

    def backward(g):
        gr = np.zeros((N, H2, W2, 4, C), dtype=g.dtype)
        np.put_along_axis(gr, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        gxp = gr.reshape(N, H2, W2, 2, 2, C).transpose(0, 1, 3, 2, 4, 5).reshape(N, 2 * H2, 2 * W2, C)
        gx = gxp[:, :H, :W, :].copy()
        if ph:
            gx[:, H - 1, :, :] += gxp[:, H, :W, :]
        if pw:
            gx[:, :, W - 1, :] += gxp[:, :H, W, :]
        if ph and pw:
            gx[:, H - 1, W - 1, :] += gxp[:, H, W, :]
        return (gx,)

    return tape.push(out, (x,), backward)


def _up_axis(x, axis):
    x = np.moveaxis(x, axis, 0)
    prev = np.concatenate([x[:1], x[:-1]], axis=0)
    nxt = np.concatenate([x[1:], x[-1:]], axis=0)
    out = np.empty((2 * x.shape[0],) + x.shape[1:], dtype=x.dtype)
    out[0::2] = 0.75 * x + 0.25 * prev
    out[1::2] = 0.75 * x + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _up_axis_T(g, axis):
    g = np.moveaxis(g, axis, 0)
    ge, go = g[0::2], g[1::2]
    dx = 0.75 * (ge + go)
    dx[:-1] += 0.25 * ge[1:]
    dx[0] += 0.25 * ge[0]
    dx[1:] += 0.25 * go[:-1]
    dx[-1] += 0.25 * go[-1]
    return np.moveaxis(dx, 0, axis)


def bilinear_upsample2x(x, tape=None, name=None):
    """2x bilinear upsampling with half-pixel centres (align_corners=False)."""
    N, H, W, C = x.shape
    if isinstance(x, Probe):
        return x.derive(name, (N, 2 * H, 2 * W, C))
    out = _up_axis(_up_axis(x, 1), 2)
    if tape is None:
        return out
    return tape.push(out, (x,), lambda g: (_up_axis_T(_up_axis_T(g, 2), 1),))


def crop_to(x, height, width, tape=None, name=None):
    """Top-left crop used to align upsampled maps with their lateral partners."""
    N, H, W, C = x.shape
    if height > H or width > W:
        raise ShapeError(f"cannot crop {H}x{W} to {height}x{width}")
    if isinstance(x, Probe):
        return x.derive(name, (N, height, width, C)) if (height, width) != (H, W) else x
    if (height, width) == (H, W):
        return x
    out = x[:, :height, :width, :]
    if tape is None:
        return out

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :height, :width, :] = g
        return (gx,)

    return tape.push(out, (x,), backward)


def concat_channels(xs, tape=None, name=None):
    xs = list(xs)
    ref = xs[0].shape[:3]
    for x in xs[1:]:
        if x.shape[:3] != ref:
            raise ShapeError(f"concat spatial mismatch: {x.shape[:3]} vs {ref}")
    total = sum(x.shape[3] for x in xs)
    if isinstance(xs[0], Probe):
        return xs[0].derive(name, (*ref, total))
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate(xs, axis=3)
    if tape is None:
        return out
    bounds = np.cumsum([x.shape[3] for x in xs])[:-1]
    return tape.push(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=3)))


def elementwise_fuse(a, b, mode="max", tape=None, name=None):
    if a.shape != b.shape:
        raise ShapeError(f"fuse shape mismatch: {a.shape} vs {b.shape}")
    if isinstance(a, Probe):
        return a.derive(name, a.shape)
    if mode == "mean":
        out = 0.5 * (a + b)
        if tape is None:
            return out
        return tape.push(out, (a, b), lambda g: (0.5 * g, 0.5 * g))
    if mode != "max":
        raise ValueError(f"unknown fuse mode {mode!r}")
    take_a = switch(a >= b)
    out = np.where(take_a, a, b)
    if tape is None:
        return out
    return tape.push(out, (a, b), lambda g: (g * take_a, g * ~take_a))


def roi_bins(windows, P):
    """Row/column extents of the ``P x P`` bins of each half-open window.

    Bin edges are ``start + floor(i * size / P)``; bins that would be empty
    (window smaller than ``P``) take the single row/column at their start.
    """
    w = np.asarray(windows, dtype=np.int64).reshape(-1, 4)
    i = np.arange(P)
    out = []
    for lo, hi in ((w[:, 0], w[:, 2]), (w[:, 1], w[:, 3])):
        size = (hi - lo)[:, None]
        start = lo[:, None] + (i * size) // P
        end = np.maximum(lo[:, None] + ((i + 1) * size) // P, start + 1)
        out.append((start, end))
    return out


def _sparse_max_table(x):
    """2D sparse table of running maxima: ``T[a, b, r, c] = max x[r:r+2^a, c:c+2^b]``.

    Returns values and the flat ``r * W + c`` position of each maximum.
    """
    H, W, C = x.shape
    La, Lb = H.bit_length(), W.bit_length()
    val = np.full((La, Lb, H, W, C), -np.inf, dtype=x.dtype)
    pos = np.zeros((La, Lb, H, W, C), dtype=np.int64)
    val[0, 0] = x
    pos[0, 0] = (np.arange(H)[:, None] * W + np.arange(W))[:, :, None]
    for a in range(La):
        if a:
            h = 1 << (a - 1)
            n = H - (1 << a) + 1
            lo, hi = val[a - 1, 0, :n], val[a - 1, 0, h:h + n]
            take = hi > lo
            val[a, 0, :n] = np.where(take, hi, lo)
            pos[a, 0, :n] = np.where(take, pos[a - 1, 0, h:h + n], pos[a - 1, 0, :n])
        for b in range(1, Lb):
            h = 1 << (b - 1)
            n = W - (1 << b) + 1
            lo, hi = val[a, b - 1, :, :n], val[a, b - 1, :, h:h + n]
            take = hi > lo
            val[a, b, :, :n] = np.where(take, hi, lo)
            pos[a, b, :, :n] = np.where(take, pos[a, b - 1, :, h:h + n], pos[a, b - 1, :, :n])
    return val, pos


def _log2_floor(n):
    return np.floor(np.log2(np.maximum(n, 1)) + 1e-9).astype(np.int64)


def _roi_pool_table(x, rs, re, cs, ce):
    """Bin maxima from four overlapping power-of-two blocks per bin."""
    H, W, C = x.shape
    val, pos = _sparse_max_table(x)
    R, P = rs.shape
    a = _log2_floor(re - rs)[:, :, None]
    b = _log2_floor(ce - cs)[:, None, :]
    r0 = rs[:, :, None]
    r1 = re[:, :, None] - (1 << a)
    c0 = cs[:, None, :]
    c1 = ce[:, None, :] - (1 << b)
    best_v = best_p = None
    for rr in (r0, r1):
        for cc in (c0, c1):
            v = val[a, b, rr, cc]  # (R, P, P, C)
            p = pos[a, b, rr, cc]
            if best_v is None:
                best_v, best_p = v, p
            else:
                take = v > best_v
                best_v = np.where(take, v, best_v)
                best_p = np.where(take, p, best_p)
    best_p = switch(best_p)
    out = np.take_along_axis(x.reshape(H * W, C), best_p.reshape(-1, C), axis=0)
    return out.reshape(R, P, P, C), best_p


def roi_pool(x, windows, P=7, tape=None, name=None, chunk_elems=1 << 21):
    """Fast R-CNN style max pooling of each window into a ``P x P x C`` vector.

    ``x`` is ``(1, H, W, C)``; ``windows`` is ``(R, 4)`` integer half-open
    ``(r0, c0, r1, c1)``, clipped to the map. Returns ``(R, P * P * C)``.
    """
    _, H, W, C = x.shape
    w = np.asarray(windows, dtype=np.int64).reshape(-1, 4)
    R = len(w)
    if isinstance(x, Probe):
        return x.derive(name, (R, P * P * C))
    if x.shape[0] != 1:
        raise ShapeError("roi_pool expects a single-image batch")
    w = np.column_stack([np.clip(w[:, 0], 0, H), np.clip(w[:, 1], 0, W),
                         np.clip(w[:, 2], 0, H), np.clip(w[:, 3], 0, W)])
    bad = (w[:, 2] <= w[:, 0]) | (w[:, 3] <= w[:, 1])
    if bad.any():
        raise DegenerateRoi(f"ROI {int(np.argmax(bad))} has zero area after clipping")
    x2 = x[0].reshape(H * W, C)
    out = np.empty((R, P, P, C), dtype=x.dtype)
    src = np.empty((R, P, P, C), dtype=np.int64)
    if R:
        (rs, re), (cs, ce) = roi_bins(w, P)
    table_elems = H.bit_length() * W.bit_length() * H * W
    if R and table_elems * C <= (1 << 24) and table_elems < R * P * P * int((re - rs).max() * (ce - cs).max()):
        out, src = _roi_pool_table(x[0], rs, re, cs, ce)
    elif R:
        step = max(1, chunk_elems // max(1, P * P * C * int((re - rs).max()) * int((ce - cs).max())))
        for s0 in range(0, R, step):
            sl = slice(s0, min(R, s0 + step))
            mh, mw = int((re[sl] - rs[sl]).max()), int((ce[sl] - cs[sl]).max())
            rows = np.minimum(rs[sl, :, None] + np.arange(mh), re[sl, :, None] - 1)
            cols = np.minimum(cs[sl, :, None] + np.arange(mw), ce[sl, :, None] - 1)
            flat = rows[:, :, None, :, None] * W + cols[:, None, :, None, :]
            flat = flat.reshape(len(rows), P, P, mh * mw)
            vals = x2[flat]  # (r, P, P, K, C)
            arg = switch(vals.argmax(axis=3))
            out[sl] = np.take_along_axis(vals, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            src[sl] = np.take_along_axis(flat, arg.reshape(len(rows), P, P, C), axis=3)
    out = out.reshape(R, P * P * C)
    if tape is None:
        return out

    def backward(g):
        idx = (src * C + np.arange(C)).ravel()
        gx = np.bincount(idx, weights=g.ravel(), minlength=H * W * C)
        return (gx.reshape(1, H, W, C).astype(g.dtype),)

    return tape.push(out, (x,), backward)


def softmax(z, tape=None, name=None):
    if isinstance(z, Probe):
        return z.derive(name, z.shape)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    if tape is None:
        return p
    return tape.push(p, (z,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def relu(x, tape=None, name=None):
    if isinstance(x, Probe):
        return x.derive(name, x.shape)
    out, mask = _relu(x)
    if tape is None:
        return out
    return tape.push(out, (x,), lambda g: (g * mask,))
