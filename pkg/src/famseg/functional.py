"""NCHW layer primitives built on :mod:`famseg.tensor`.

Convolutions are computed with strided window views; depthwise kernels use a
tap loop, which is faster than im2col when each group holds one channel.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW input and (O, C/groups, kh, kw) weight.

    Output spatial size is ``(H + 2*pad - kh) // stride + 1`` per axis.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if kh < 1 or kw < 1:
        raise ShapeError("kernel dimensions must be >= 1")
    if c % groups or o % groups:
        raise ShapeError(f"channels {c} / outputs {o} not divisible by groups={groups}")
    if cg != c // groups:
        raise ShapeError(f"weight expects {cg} input channels per group, input has {c // groups}")
    ho, wo = _out_size(h, kh, sh, ph), _out_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")

    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wd = weight.data
    depthwise = cg == 1 and o == c == groups

    if depthwise:
        out = np.zeros((n, c, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xd[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]
                out += patch * wd[None, :, 0, i, j, None, None]
        cols = None
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        # (n, g, cg, ho, wo, kh, kw) -> (g, n*ho*wo, cg*kh*kw)
        win = win.reshape(n, groups, cg, ho, wo, kh, kw)
        cols = np.ascontiguousarray(win.transpose(1, 0, 3, 4, 2, 5, 6)).reshape(groups, n * ho * wo, cg * kh * kw)
        wmat = wd.reshape(groups, o // groups, cg * kh * kw)
        res = np.matmul(cols, wmat.transpose(0, 2, 1))  # (g, n*ho*wo, og)
        out = res.reshape(groups, n, ho, wo, o // groups).transpose(1, 0, 4, 2, 3).reshape(n, o, ho, wo)
        out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if depthwise:
            if weight.requires_grad:
                gw = np.zeros_like(wd)
            if x.requires_grad:
                gxp = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None), slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))
                    if weight.requires_grad:
                        gw[:, 0, i, j] = (g * xd[sl]).sum(axis=(0, 2, 3))
                    if x.requires_grad:
                        gxp[sl] += g * wd[None, :, 0, i, j, None, None]
        else:
            og = o // groups
            gmat = g.reshape(n, groups, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, og)
            if weight.requires_grad:
                gw = np.matmul(gmat.transpose(0, 2, 1), cols).reshape(o, cg, kh, kw)
            if x.requires_grad:
                gcols = np.matmul(gmat, wd.reshape(groups, og, cg * kh * kw))
                gcols = gcols.reshape(groups, n, ho, wo, cg, kh, kw)
                gxp = np.zeros_like(xd)
                for i in range(kh):
                    for j in range(kw):
                        tap = gcols[:, :, :, :, :, i, j].transpose(1, 0, 4, 2, 3).reshape(n, c, ho, wo)
                        gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += tap
        if x.requires_grad:
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw, "conv2d")


def strip_conv(x: Tensor, weight: Tensor, axis: str, k: int | None = None) -> Tensor:
    """Depthwise 1-D convolution along one spatial axis, size preserving.

    ``weight`` holds one length-``k`` kernel per channel, shape (C, k); it is
    laid out as (C, 1, 1, k) for ``axis="horizontal"`` and (C, 1, k, 1) for
    ``axis="vertical"``.
    """
    c = x.shape[1]
    if weight.ndim != 2 or weight.shape[0] != c:
        raise ShapeError(f"strip kernel must be ({c}, k), got {weight.shape}")
    klen = weight.shape[1]
    if k is not None and k != klen:
        raise ShapeError(f"kernel length {klen} does not match k={k}")
    if klen % 2 == 0:
        raise ValueError(f"strip kernel length must be odd, got {klen}")
    pad = (klen - 1) // 2
    if axis == "horizontal":
        return conv2d(x, weight.reshape(c, 1, 1, klen), padding=(0, pad), groups=c)
    if axis == "vertical":
        return conv2d(x, weight.reshape(c, 1, klen, 1), padding=(pad, 0), groups=c)
    raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    out = xhat
    if gamma is not None:
        out = out * gamma.data[None, :, None, None]
    if beta is not None:
        out = out + beta.data[None, :, None, None]
    m = xg.shape[2]

    def bw(g):
        gg = g * gamma.data[None, :, None, None] if gamma is not None else g
        gg = gg.reshape(n, groups, m)
        xh = xhat.reshape(n, groups, m)
        gx = inv * (gg - gg.mean(axis=2, keepdims=True) - xh * (gg * xh).mean(axis=2, keepdims=True))
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma is not None and gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta is not None and beta.requires_grad else None
        res = [gx.reshape(n, c, h, w)]
        if gamma is not None:
            res.append(ggamma)
        if beta is not None:
            res.append(gbeta)
        return res

    parents = [x] + [t for t in (gamma, beta) if t is not None]
    return Tensor._make(out, parents, bw, "group_norm")


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kernel, stride, 0), _out_size(w, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError("pool window larger than input")
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out += x.data[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    out /= kernel * kernel

    def bw(g):
        gx = np.zeros_like(x.data)
        gk = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gk
        return (gx,)

    return Tensor._make(out, (x,), bw, "avg_pool2d")


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), bw, "nearest_upsample")


def nearest_downsample(x: Tensor, factor: int) -> Tensor:
    """Nearest resampling to ``1/factor`` size: keeps pixel ``(i*factor, j*factor)``."""
    if factor == 1:
        return x
    return x[:, :, ::factor, ::factor]


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros(labels.shape[:1] + (num_classes,) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.int64), 1.0, axis=1)
    return out

