"""Selective state-space filter for residual shortcuts.

Scalar decay per head (the SSD form): for every head the state is a
``state_dim x head_dim`` matrix updated as

    h_t = a_t * h_{t-1} + B_t x_t^T,      y_t = C_t^T h_t + D * x_t

with ``a_t in (0, 1)``, ``B_t`` and ``C_t`` produced from the token itself.
``B`` and ``C`` are shared by all heads, ``a`` and ``D`` are per head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Module, param
from .tensor import NumericError, ShapeError, Tensor, concat, flip, sigmoid

DIRECTIONS = ("left_right", "right_left", "top_bottom", "bottom_top")


@dataclass(frozen=True)
class ScanDirections:
    directions: tuple = DIRECTIONS
    merge: str = "mean"

    def __post_init__(self):
        if not self.directions:
            raise ValueError("at least one scan direction is required")
        bad = set(self.directions) - set(DIRECTIONS)
        if bad:
            raise ValueError(f"unknown scan directions {sorted(bad)}")
        if self.merge != "mean":
            raise ValueError(f"unsupported merge {self.merge!r}")


def _scan_shapes(x, a, B, C, D):
    *lead, L, d = x.shape
    H = a.shape[-1]
    S = B.shape[-1]
    if L < 1:
        raise ShapeError("sequence length must be >= 1")
    if d % H:
        raise ShapeError(f"width {d} not divisible by {H} heads")
    if a.shape[:-1] != x.shape[:-1] or B.shape[:-1] != x.shape[:-1] or C.shape != B.shape:
        raise ShapeError(f"scan operands disagree: x{x.shape} a{a.shape} B{B.shape} C{C.shape}")
    if D.shape != (H,):
        raise ShapeError(f"D must have shape ({H},), got {D.shape}")
    return tuple(lead), L, d, H, S, d // H


def selective_scan(x: Tensor, a: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Sequential linear-time scan over axis ``-2``.

    Shapes: ``x (..., L, d)``, ``a (..., L, heads)``, ``B, C (..., L, state)``,
    ``D (heads,)``. Returns ``(..., L, d)``.
    """
    lead, L, d, H, S, P = _scan_shapes(x, a, B, C, D)
    xd = x.data.reshape(*lead, L, H, P)
    ad, Bd, Cd, Dd = a.data, B.data, C.data, D.data
    hs = np.zeros((L + 1, *lead, H, S, P), dtype=x.dtype)
    y = np.empty_like(xd)
    h = hs[0]
    for t in range(L):
        with np.errstate(over="ignore", invalid="ignore"):
            h = ad[..., t, :, None, None] * h + Bd[..., t, None, :, None] * xd[..., t, :, None, :]
        if not np.all(np.isfinite(h)):
            raise NumericError(f"selective_scan state became non-finite at step {t}")
        hs[t + 1] = h
        y[..., t, :, :] = np.einsum("...hsp,...s->...hp", h, Cd[..., t, :]) + Dd[:, None] * xd[..., t, :, :]

    def bw(g):
        g = g.reshape(*lead, L, H, P)
        dx = np.empty_like(xd)
        da = np.empty_like(ad)
        dB = np.empty_like(Bd)
        dC = np.empty_like(Cd)
        dD = np.zeros_like(Dd)
        dh = np.zeros_like(hs[0])
        for t in range(L - 1, -1, -1):
            dy = g[..., t, :, :]
            xt = xd[..., t, :, :]
            dC[..., t, :] = np.einsum("...hsp,...hp->...s", hs[t + 1], dy)
            dh = dh + Cd[..., t, None, :, None] * dy[..., :, None, :]
            dD += (dy * xt).reshape(-1, H, P).sum(axis=(0, 2))
            da[..., t, :] = (dh * hs[t]).sum(axis=(-2, -1))
            dB[..., t, :] = np.einsum("...hsp,...hp->...s", dh, xt)
            dx[..., t, :, :] = Dd[:, None] * dy + np.einsum("...hsp,...s->...hp", dh, Bd[..., t, :])
            dh = ad[..., t, :, None, None] * dh
        return dx.reshape(x.shape), da, dB, dC, dD

    return Tensor._make(y.reshape(x.shape), (x, a, B, C, D), bw, "selective_scan")


def scan_oracle(x, a, B, C, D) -> np.ndarray:
    """Quadratic materialization of the scan, for verification.

    ``y_t = sum_{s<=t} (C_t . B_s) * prod_{r=s+1..t} a_r * x_s + D * x_t``,
    computed per head without any running state.
    """
    x, a, B, C, D = (np.asarray(getattr(v, "data", v), dtype=np.float64) for v in (x, a, B, C, D))
    *lead, L, d = x.shape
    H = a.shape[-1]
    P = d // H
    xh = x.reshape(*lead, L, H, P)
    y = np.zeros_like(xh)
    for t in range(L):
        for s in range(t + 1):
            decay = np.prod(a[..., s + 1 : t + 1, :], axis=-2)  # (..., H)
            cb = np.sum(C[..., t, :] * B[..., s, :], axis=-1)  # (...)
            y[..., t, :, :] += (cb[..., None] * decay)[..., None] * xh[..., s, :, :]
        y[..., t, :, :] += D[:, None] * xh[..., t, :, :]
    return y.reshape(x.shape)


def _to_sequence(x: Tensor, direction: str) -> Tensor:
    """(N, C, H, W) -> (N, L, C) in the scan order of ``direction``."""
    n, c, h, w = x.shape
    if direction in ("left_right", "right_left"):
        seq = x.transpose(0, 2, 3, 1).reshape(n, h * w, c)
    else:
        seq = x.transpose(0, 3, 2, 1).reshape(n, h * w, c)
    if direction in ("right_left", "bottom_top"):
        seq = flip(seq, 1)
    return seq


def _from_sequence(seq: Tensor, direction: str, h: int, w: int) -> Tensor:
    n, _, c = seq.shape
    if direction in ("right_left", "bottom_top"):
        seq = flip(seq, 1)
    if direction in ("left_right", "right_left"):
        return seq.reshape(n, h, w, c).transpose(0, 3, 1, 2)
    return seq.reshape(n, w, h, c).transpose(0, 3, 2, 1)


class MambaFilter2d(Module):
    """Multi-direction selective scan over a feature map.

    Decay, input and output projections are 1x1 convolutions of the map, so
    every token gets its own ``a_t``, ``B_t`` and ``C_t``. Directions are
    scanned independently, averaged, and passed through a residual 1x1
    projection that starts at zero.
    """

    def __init__(self, channels, rng, state_dim=16, heads=None, directions: ScanDirections | None = None,
                 dtype=np.float64):
        heads = heads or max(1, channels // 16)
        if channels % heads:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.channels, self.state_dim, self.heads = channels, state_dim, heads
        self.directions = directions or ScanDirections()
        self.proj_a = Conv2d(channels, heads, 1, rng, dtype=dtype)
        self.proj_a.bias.data[:] = 2.0  # a ~ 0.88 at init
        self.proj_B = Conv2d(channels, state_dim, 1, rng, bias=False, dtype=dtype)
        self.proj_C = Conv2d(channels, state_dim, 1, rng, bias=False, dtype=dtype)
        self.proj_B.weight.data *= np.sqrt(0.5 / state_dim)
        self.proj_C.weight.data *= np.sqrt(0.5 / state_dim)
        self.D = param(np.ones(heads), dtype)
        self.out_proj = Conv2d(channels, channels, 1, rng, bias=False, dtype=dtype)
        self.out_proj.weight.data[:] = 0.0

    def scan_inputs(self, x: Tensor):
        return sigmoid(self.proj_a(x)), self.proj_B(x), self.proj_C(x)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        a, B, C = self.scan_inputs(x)
        dirs = self.directions.directions
        xs = concat([_to_sequence(x, d) for d in dirs], 0)
        As = concat([_to_sequence(a, d) for d in dirs], 0)
        Bs = concat([_to_sequence(B, d) for d in dirs], 0)
        Cs = concat([_to_sequence(C, d) for d in dirs], 0)
        ys = selective_scan(xs, As, Bs, Cs, self.D)
        merged = None
        for i, d in enumerate(dirs):
            yd = _from_sequence(ys[i * n : (i + 1) * n], d, h, w)
            merged = yd if merged is None else merged + yd
        merged = merged * (1.0 / len(dirs))
        return merged + self.out_proj(merged)


def mamba_filter_2d(x: Tensor, filt: MambaFilter2d) -> Tensor:
    return filt(x)


def bottle_shortcut(x: Tensor, flag: str, filt: MambaFilter2d | None = None) -> Tensor:
    """Shortcut path of a bottle block: passthrough or Mamba-filtered."""
    if flag == "identity":
        return x
    if flag == "mamba":
        if filt is None:
            raise ValueError("mamba shortcut needs a MambaFilter2d")
        return filt(x)
    raise ValueError(f"unknown shortcut filter {flag!r}")


__all__ = [
    "DIRECTIONS",
    "ScanDirections",
    "selective_scan",
    "scan_oracle",
    "MambaFilter2d",
    "mamba_filter_2d",
    "bottle_shortcut",
]
