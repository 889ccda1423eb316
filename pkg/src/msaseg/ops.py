"""Differentiable kernels: softmax, layer norm, bilinear resampling, conv2d,
the deformable tap contraction, and cross-entropy.

conv2d and tap_contract accumulate their taps in the same (ky, kx, cin)
order starting from the bias, so a zero-offset deformable convolution
reproduces conv2d bit-for-bit in f64.
"""

from __future__ import annotations

import numpy as np

from .counting import MAC_COUNTER
from .errors import DimensionError, ParameterError
from .tensor import (
    FLOAT_DTYPES,
    Tensor,
    as_tensor,
    make_op,
    needs_grad,
)


def softmax(x, axis=-1):
    """Exponential normalization along `axis`, max-shifted for stability."""
    x = as_tensor(x)
    if x.dtype not in FLOAT_DTYPES:
        raise ParameterError("softmax requires a floating tensor")
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    ax = axis % x.ndim
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - inner),)

    return make_op(y, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data
    ng, nb, nx = needs_grad(gamma), needs_grad(beta), needs_grad(x)
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        ggamma = (g * xhat).sum(axis=lead) if ng else None
        gbeta = g.sum(axis=lead) if nb else None
        gx = None
        if nx:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return make_op(out, (x, gamma, beta), bw)


def _resize_axis_coords(n_in, n_out):
    # align-corners=false: src = (dst + 0.5) * n_in/n_out - 0.5, edges clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0f = np.floor(src)
    w = src - i0f
    i0 = np.clip(i0f.astype(np.int64), 0, n_in - 1)
    i1 = np.clip(i0f.astype(np.int64) + 1, 0, n_in - 1)
    return i0, i1, w


def bilinear_resize(x, out_h, out_w):
    """Resize a C x H x W map with bilinear interpolation (align-corners=false).

    Resizing to the input size returns the input tensor unchanged. Border
    samples clamp to the edge, so constant maps stay exactly constant.
    """
    x = as_tensor(x)
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output extents must be >= 1, got {out_h}x{out_w}")
    if x.ndim != 3:
        raise DimensionError(f"expected C x H x W input, got {x.shape}")
    c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x
    y0, y1, wy = _resize_axis_coords(h, out_h)
    x0, x1, wx = _resize_axis_coords(w, out_w)
    wy_col = wy[None, :, None].astype(x.dtype)
    wx_row = wx[None, None, :].astype(x.dtype)

    xd = x.data
    rows = xd[:, y0, :] + wy_col * (xd[:, y1, :] - xd[:, y0, :])  # C x OH x W
    out = rows[:, :, x0] + wx_row * (rows[:, :, x1] - rows[:, :, x0])

    def bw(g):
        grows = np.zeros((c, out_h, w), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), x0), g * (1.0 - wx_row))
        np.add.at(grows, (slice(None), slice(None), x1), g * wx_row)
        gx = np.zeros((c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), y0, slice(None)), grows * (1.0 - wy_col))
        np.add.at(gx, (slice(None), y1, slice(None)), grows * wy_col)
        return (gx,)

    return make_op(out, (x,), bw)


def bilinear_sample(x, points):
    """Sample a C x H x W map at fractional (row, col) positions.

    Out-of-bounds neighbors contribute zero. Differentiable with respect
    to both the map and the positions.
    """
    x, points = as_tensor(x), as_tensor(points)
    if x.ndim != 3:
        raise DimensionError(f"expected C x H x W input, got {x.shape}")
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionError(f"expected P x 2 points, got {points.shape}")
    if x.dtype != points.dtype:
        raise ParameterError("map and points must share a floating dtype")
    c, h, w = x.shape
    xd, pd = x.data, points.data

    py, px = pd[:, 0], pd[:, 1]
    y0f, x0f = np.floor(py), np.floor(px)
    fy, fx = py - y0f, px - x0f
    y0, x0 = y0f.astype(np.int64), x0f.astype(np.int64)
    y1, x1 = y0 + 1, x0 + 1

    def fetch(yi, xi):
        m = ((yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)).astype(xd.dtype)
        v = xd[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)] * m
        return v, m

    v00, m00 = fetch(y0, x0)
    v01, m01 = fetch(y0, x1)
    v10, m10 = fetch(y1, x0)
    v11, m11 = fetch(y1, x1)
    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    MAC_COUNTER.add(4 * out.size)
    nx, npts = needs_grad(x), needs_grad(points)

    def bw(g):
        gx = gp = None
        if nx:
            gx = np.zeros((c, h, w), dtype=g.dtype)
            for yi, xi, wk, mk in (
                (y0, x0, w00, m00),
                (y0, x1, w01, m01),
                (y1, x0, w10, m10),
                (y1, x1, w11, m11),
            ):
                np.add.at(
                    gx,
                    (slice(None), np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)),
                    g * (wk * mk),
                )
        if npts:
            dfy = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx
            dfx = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy
            gp = np.stack(((g * dfy).sum(axis=0), (g * dfx).sum(axis=0)), axis=1)
        return gx, gp

    return make_op(out, (x, points), bw)


def conv_output_extent(n, k, stride, dilation, padding):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, w, bias, stride=1, dilation=1, padding=0):
    """2-D cross-correlation with zero padding over a C x H x W map.

    Taps accumulate per output pixel starting from the bias, in
    (ky, kx, cin) order; tests and the deformable path rely on that order.
    """
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"expected CxHxW input and OxCxKxK weights, got {x.shape}, {w.shape}")
    cin, h, ww_ = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"kernel must be square with odd extent, got {k}x{k2}")
    if cin_w != cin:
        raise DimensionError(f"input channels {cin} do not match weights {cin_w}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {bias.shape}")
    stride, dilation, padding = int(stride), int(dilation), int(padding)
    ho = conv_output_extent(h, k, stride, dilation, padding)
    wo = conv_output_extent(ww_, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"empty output {ho}x{wo} for input {h}x{ww_} with k={k}, "
            f"stride={stride}, dilation={dilation}, padding={padding}"
        )

    xd, wd, bd = x.data, w.data, bias.data
    xpad = np.zeros((cin, h + 2 * padding, ww_ + 2 * padding), dtype=xd.dtype)
    xpad[:, padding : padding + h, padding : padding + ww_] = xd

    def tap_view(arr, ky, kx):
        return arr[
            :,
            ky * dilation : ky * dilation + (ho - 1) * stride + 1 : stride,
            kx * dilation : kx * dilation + (wo - 1) * stride + 1 : stride,
        ]

    out = np.empty((cout, ho, wo), dtype=xd.dtype)
    out[:] = bd[:, None, None]
    for ky in range(k):
        for kx in range(k):
            view = tap_view(xpad, ky, kx)
            for c in range(cin):
                out += wd[:, c, ky, kx][:, None, None] * view[c]
    MAC_COUNTER.add(cout * ho * wo * cin * k * k)
    nx, nw, nb = needs_grad(x), needs_grad(w), needs_grad(bias)

    def bw(g):
        gx = gw = gb = None
        if nb:
            gb = g.sum(axis=(1, 2))
        if nw:
            gw = np.empty_like(wd)
            for ky in range(k):
                for kx in range(k):
                    view = tap_view(xpad, ky, kx)
                    gw[:, :, ky, kx] = np.einsum("ohw,chw->oc", g, view)
        if nx:
            gpad = np.zeros_like(xpad)
            for ky in range(k):
                for kx in range(k):
                    tap_view(gpad, ky, kx)[...] += np.einsum(
                        "ohw,oc->chw", g, wd[:, :, ky, kx]
                    )
            gx = gpad[:, padding : padding + h, padding : padding + ww_]
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    return make_op(out, (x, w, bias), bw)


def tap_contract(w, bias, samples):
    """Weighted reduction of per-tap samples: out[o,p] = b[o] + sum w[o,c,k]*s[k,c,p].

    `samples` is K*K x Cin x P, taps in row-major (ky, kx) order; the
    accumulation mirrors conv2d so the two agree bitwise at zero offsets.
    """
    w, bias, samples = as_tensor(w), as_tensor(bias), as_tensor(samples)
    cout, cin, k, k2 = w.shape
    if k != k2 or samples.ndim != 3 or samples.shape[:2] != (k * k, cin):
        raise DimensionError(
            f"samples must be {k * k} x {cin} x P for weights {w.shape}, got {samples.shape}"
        )
    if bias.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {bias.shape}")
    wd, bd, sd = w.data, bias.data, samples.data
    p = sd.shape[2]
    wflat = wd.reshape(cout, cin, k * k)

    out = np.empty((cout, p), dtype=sd.dtype)
    out[:] = bd[:, None]
    for tap in range(k * k):
        for c in range(cin):
            out += wflat[:, c, tap][:, None] * sd[tap, c]
    MAC_COUNTER.add(cout * cin * k * k * p)
    nw, nb, ns = needs_grad(w), needs_grad(bias), needs_grad(samples)

    def bw(g):
        gw = gb = gs = None
        if nb:
            gb = g.sum(axis=1)
        if nw:
            gw = np.einsum("op,kcp->ock", g, sd).reshape(cout, cin, k, k)
        if ns:
            gs = np.einsum("op,ock->kcp", g, wflat)
        return gw, gb, gs

    return make_op(out, (w, bias, samples), bw)


def cross_entropy(logits, gt, ignore_label=255):
    """Softmax cross-entropy over the class axis, averaged over non-ignored pixels."""
    logits = as_tensor(logits)
    if logits.dtype not in FLOAT_DTYPES:
        raise ParameterError("logits must be floating")
    if logits.ndim < 2:
        raise DimensionError(f"expected Cls x ... logits, got {logits.shape}")
    gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if gt_arr.dtype != np.uint32:
        raise ParameterError(f"labels must be u32, got {gt_arr.dtype}")
    if tuple(gt_arr.shape) != logits.shape[1:]:
        raise DimensionError(
            f"labels {tuple(gt_arr.shape)} do not match logits {logits.shape}"
        )
    ncls = logits.shape[0]
    flat_gt = gt_arr.reshape(-1)
    valid = flat_gt != np.uint32(ignore_label)
    bad = valid & (flat_gt >= ncls)
    if bad.any():
        raise ParameterError(
            f"label {int(flat_gt[bad][0])} outside [0, {ncls}) and not ignore"
        )
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ParameterError("all pixels carry the ignore label; mean undefined")

    ld = logits.data.reshape(ncls, -1)
    shifted = ld - ld.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=0, keepdims=True)
    lse = np.log(denom)[0]
    safe_gt = np.where(valid, flat_gt, 0).astype(np.int64)
    picked = shifted[safe_gt, np.arange(ld.shape[1])]
    nll = lse - picked
    loss = (nll * valid).sum() / n_valid

    def bw(g):
        probs = e / denom
        probs[safe_gt, np.arange(ld.shape[1])] -= 1.0
        probs *= valid[None, :] * (g / n_valid)
        return (probs.reshape(logits.shape).astype(ld.dtype, copy=False),)

    return make_op(loss.astype(ld.dtype), (logits,), bw)
