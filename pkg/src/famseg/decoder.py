"""Feature-aware upsampling decoder and classifier head.

The upsampler predicts one normalized ``k_up x k_up`` kernel per output
pixel from a channel-compressed copy of the input, then rebuilds every output
pixel as that kernel's weighted sum over the input neighbourhood centred on
its source pixel ``(i // scale, j // scale)``. Kernels are shared by all
channels. Borders are zero-padded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, ConvNormAct, Module
from .tensor import ShapeError, Tensor, softmax


@dataclass
class FamSpec:
    c_in: int
    c_compressed: int | None = None
    k_up: int = 5
    k_enc: int = 3
    scale: int = 2

    def __post_init__(self):
        if self.c_compressed is None:
            self.c_compressed = max(self.c_in // 4, 8)
        if self.k_up % 2 == 0:
            raise ValueError(f"k_up must be odd, got {self.k_up}")
        if self.k_enc % 2 == 0:
            raise ValueError(f"k_enc must be odd, got {self.k_enc}")
        if self.c_compressed > self.c_in:
            raise ValueError(f"compressed channels {self.c_compressed} exceed input channels {self.c_in}")
        if self.scale < 2:
            raise ValueError("scale must be >= 2")


@dataclass
class DecoderConfig:
    fuse_stages: tuple = (2, 3, 4)
    refine_channels: int = 32
    num_classes: int = 3
    fusion: bool = True
    k_up: int = 5
    k_enc: int = 3
    kernel_init: str = "centre"  # or "uniform"

    def __post_init__(self):
        self.fuse_stages = tuple(self.fuse_stages)
        if self.kernel_init not in KERNEL_INITS:
            raise ValueError(f"kernel_init must be one of {KERNEL_INITS}")
        if list(self.fuse_stages) != sorted(self.fuse_stages) or not self.fuse_stages:
            raise ValueError("fuse_stages must be a non-empty ascending list")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


KERNEL_INITS = ("uniform", "centre")


def reassemble(x: Tensor, kernels: Tensor, k: int, scale: int) -> Tensor:
    """Content-aware reassembly.

    ``x``: (N, C, H, W). ``kernels``: (N, k*k, scale*scale, H, W) where tap
    ``u*k + v`` of phase ``di*scale + dj`` at ``(h, w)`` weights input pixel
    ``(h + u - k//2, w + v - k//2)`` for output pixel ``(h*scale + di, w*scale + dj)``.
    """
    n, c, h, w = x.shape
    if kernels.shape != (n, k * k, scale * scale, h, w):
        raise ShapeError(f"kernels must be {(n, k * k, scale * scale, h, w)}, got {kernels.shape}")
    r = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)))
    kd = kernels.data
    out = np.zeros((n, c, h * scale, w * scale), dtype=x.dtype)
    for di in range(scale):
        for dj in range(scale):
            ph = di * scale + dj
            acc = np.zeros((n, c, h, w), dtype=x.dtype)
            for u in range(k):
                for v in range(k):
                    acc += kd[:, u * k + v, ph, None] * xp[:, :, u : u + h, v : v + w]
            out[:, :, di::scale, dj::scale] = acc

    def bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gk = np.zeros_like(kd) if kernels.requires_grad else None
        for di in range(scale):
            for dj in range(scale):
                ph = di * scale + dj
                gphase = g[:, :, di::scale, dj::scale]
                for u in range(k):
                    for v in range(k):
                        win = xp[:, :, u : u + h, v : v + w]
                        if gk is not None:
                            gk[:, u * k + v, ph] = (gphase * win).sum(axis=1)
                        if gxp is not None:
                            gxp[:, :, u : u + h, v : v + w] += kd[:, u * k + v, ph, None] * gphase
        gx = gxp[:, :, r : r + h, r : r + w] if gxp is not None else None
        return gx, gk

    return Tensor._make(out, (x, kernels), bw, "reassemble")


def centre_logits(k: int, scale: int, sigma: float = 0.75) -> np.ndarray:
    """Kernel-predictor bias giving each phase a Gaussian over taps centred on its sub-pixel position.

    Shape ``(k*k * scale*scale,)`` in the predictor's channel order (tap major).
    """
    r = k // 2
    off = (np.arange(scale) + 0.5) / scale - 0.5
    u = np.arange(k) - r
    d2 = (u[:, None, None, None] - off[None, None, :, None]) ** 2 + (u[None, :, None, None] - off[None, None, None, :]) ** 2
    return (-d2 / (2 * sigma**2)).reshape(k * k * scale * scale)


class FAMUpsample(Module):
    """Compressor (1x1) -> kernel predictor (k_enc x k_enc) -> softmax over taps -> reassembly.

    With ``init="centre"`` the predictor starts out producing smooth
    interpolation kernels instead of a flat box filter.
    """

    def __init__(self, spec: FamSpec, rng, dtype=np.float64, init="uniform"):
        self.spec = spec
        self.compress = Conv2d(spec.c_in, spec.c_compressed, 1, rng, dtype=dtype)
        self.encode = Conv2d(spec.c_compressed, spec.scale**2 * spec.k_up**2, spec.k_enc, rng, dtype=dtype)
        self.encode.weight.data *= 0.1
        if init == "centre":
            self.encode.bias.data[:] = centre_logits(spec.k_up, spec.scale)

    def kernel_logits(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        s, k = self.spec.scale, self.spec.k_up
        return self.encode(self.compress(x)).reshape(n, k * k, s * s, h, w)

    def kernels(self, x: Tensor) -> Tensor:
        return softmax(self.kernel_logits(x), axis=1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.c_in:
            raise ShapeError(f"FAM expects {self.spec.c_in} channels, got {x.shape[1]}")
        return reassemble(x, self.kernels(x), self.spec.k_up, self.spec.scale)


def fam_upsample(x: Tensor, spec: FamSpec, params: FAMUpsample) -> Tensor:
    if params.spec != spec:
        raise ValueError("parameters were built for a different FamSpec")
    return params(x)


class Decoder(Module):
    """Progressive FAM upsampling with skip fusion down to stride 4, then two more FAM steps and a 1x1 classifier.

    Only the stages listed in ``fuse_stages`` are read. With ``fusion=False``
    the skips are dropped and only the deepest listed stage is decoded.
    """

    def __init__(self, cfg: DecoderConfig, stage_channels, rng, dtype=np.float64):
        self.cfg = cfg
        c = cfg.refine_channels
        deepest = cfg.fuse_stages[-1]
        self.deep_proj = Conv2d(stage_channels[deepest - 1], c, 1, rng, dtype=dtype)
        skips = cfg.fuse_stages[:-1][::-1] if cfg.fusion else ()
        # upsampling steps from stride 2**(deepest+1) down to stride 4, then to stride 1
        n_up = deepest - 1 + 2
        self.ups = [FAMUpsample(FamSpec(c, k_up=cfg.k_up, k_enc=cfg.k_enc), rng, dtype, cfg.kernel_init)
                    for _ in range(n_up)]
        self.skip_stage = {}
        self.skip_proj = []
        for s in skips:
            self.skip_stage[deepest - s - 1] = len(self.skip_proj)
            self.skip_proj.append(Conv2d(stage_channels[s - 1], c, 1, rng, dtype=dtype))
        self.refine = [ConvNormAct(c, c, 3, rng, dtype=dtype) for _ in range(deepest - 1)]
        self.skips = skips
        self.classifier = Conv2d(c, cfg.num_classes, 1, rng, dtype=dtype)

    def forward(self, stages) -> Tensor:
        deepest = self.cfg.fuse_stages[-1]
        if len(stages) < deepest:
            raise ShapeError(f"decoder needs {deepest} stages, got {len(stages)}")
        x = self.deep_proj(stages[deepest - 1])
        for step, up in enumerate(self.ups):
            x = up(x)
            if step < len(self.refine):
                if step in self.skip_stage:
                    s = self.skips[self.skip_stage[step]]
                    x = x + self.skip_proj[self.skip_stage[step]](stages[s - 1])
                x = self.refine[step](x)
        return self.classifier(x)


def decode(stages, cfg: DecoderConfig, params: Decoder) -> Tensor:
    if params.cfg != cfg:
        raise ValueError("parameters were built for a different config")
    return params(stages)


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(arr, axis=1).astype(np.uint8)
