"""Encoder: strip-convolution stages, residual stages, aggregation, NMF enhancement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .mamba import MambaFilter2d, ScanDirections, bottle_shortcut
from .nn import Conv2d, ConvNormAct, GroupNorm, Module, param
from .tensor import ShapeError, Tensor, concat, gelu, matmul, relu


@dataclass
class StripBlockSpec:
    channels: int
    branch_kernels: tuple = (7,)
    use_stem_5x5: bool = True

    def __post_init__(self):
        if self.channels <= 0:
            raise ValueError("channels must be positive")
        for k in self.branch_kernels:
            if k % 2 == 0 or k < 1:
                raise ValueError(f"strip kernels must be odd, got {k}")


@dataclass
class ResidualBlockSpec:
    in_channels: int
    mid_channels: int
    out_channels: int
    kind: str = "bottle_block"
    stride: int = 1
    shortcut_filter: str = "identity"

    def __post_init__(self):
        if self.kind == "convolution_block":
            if self.stride != 2:
                raise ValueError("convolution_block downsamples: stride must be 2")
            if self.shortcut_filter != "identity":
                raise ValueError("convolution_block uses a 1x1 projection shortcut, not a filter")
        elif self.kind == "bottle_block":
            if self.stride != 1:
                raise ValueError("bottle_block keeps resolution: stride must be 1")
            if self.in_channels != self.out_channels:
                raise ValueError("bottle_block shortcut is an identity path: in and out channels must match")
            if self.shortcut_filter not in ("identity", "mamba"):
                raise ValueError(f"unknown shortcut filter {self.shortcut_filter!r}")
        else:
            raise ValueError(f"unknown residual block kind {self.kind!r}")


@dataclass
class EncoderConfig:
    stage_channels: tuple = (32, 64, 160, 256)
    stage_depths: tuple = (2, 2, 2, 2)
    branch_kernels: tuple = (7,)
    fuse_last_n: int = 3
    hamburger: bool = True
    ham_rank: int = 2
    ham_iters: int = 6
    mamba: bool = True
    mamba_state: int = 16
    mamba_heads: int | None = None
    mamba_directions: tuple = field(default_factory=lambda: ScanDirections().directions)
    in_channels: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_depths = tuple(self.stage_depths)
        self.branch_kernels = tuple(self.branch_kernels)
        self.mamba_directions = tuple(self.mamba_directions)
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ValueError("encoder has exactly 4 stages")
        if not 1 <= self.fuse_last_n <= 4:
            raise ValueError("fuse_last_n must be between 1 and the number of stages")
        if any(d < 1 for d in self.stage_depths):
            raise ValueError("stage depths must be >= 1")
        StripBlockSpec(self.stage_channels[0], self.branch_kernels)


# strip convolution ------------------------------------------------------------


def strip_param_count(K: int, Ho: int, Wo: int) -> tuple[int, int]:
    """Cost of a KxK window versus a horizontal plus a vertical 1-D pass.

    Returns ``(K*Ho*Wo*K, 2*Ho*Wo*K)``.
    """
    if min(K, Ho, Wo) <= 0:
        raise ValueError("arguments must be positive")
    return K * Ho * Wo * K, 2 * Ho * Wo * K


class StripBlock(Module):
    """5x5 depthwise stem, parallel horizontal/vertical strip branches, 1x1 mix.

    Each branch scans the stem output along one axis at a time; the two
    passes are summed, so a branch's impulse response is a cross, not a box.
    The block has no bias or activation and is therefore linear in ``x``.
    """

    def __init__(self, spec: StripBlockSpec, rng, dtype=np.float64):
        c = spec.channels
        self.spec = spec
        self.stem = param(rng.normal(0, 1 / 5, size=(c, 1, 5, 5)), dtype) if spec.use_stem_5x5 else None
        self.horizontal = [param(rng.normal(0, 1 / np.sqrt(k), size=(c, k)), dtype) for k in spec.branch_kernels]
        self.vertical = [param(rng.normal(0, 1 / np.sqrt(k), size=(c, k)), dtype) for k in spec.branch_kernels]
        self.mix = param(rng.normal(0, np.sqrt(1.0 / c), size=(c, c, 1, 1)), dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.channels:
            raise ShapeError(f"strip block expects {self.spec.channels} channels, got {x.shape[1]}")
        s = F.conv2d(x, self.stem, padding=2, groups=self.spec.channels) if self.stem is not None else x
        acc = s
        for wh, wv in zip(self.horizontal, self.vertical):
            acc = acc + F.strip_conv(s, wh, "horizontal") + F.strip_conv(s, wv, "vertical")
        return F.conv2d(acc, self.mix)


def strip_block_forward(x: Tensor, spec: StripBlockSpec, params: StripBlock) -> Tensor:
    if params.spec != spec:
        raise ValueError("parameters were built for a different StripBlockSpec")
    return params(x)


class StripLayer(Module):
    """Pre-norm residual unit around a strip block, followed by a 1x1 MLP."""

    def __init__(self, channels, branch_kernels, rng, mlp_ratio=2, dtype=np.float64):
        self.norm1 = GroupNorm(channels, dtype)
        self.block = StripBlock(StripBlockSpec(channels, tuple(branch_kernels)), rng, dtype)
        self.norm2 = GroupNorm(channels, dtype)
        self.fc1 = Conv2d(channels, channels * mlp_ratio, 1, rng, dtype=dtype)
        self.fc2 = Conv2d(channels * mlp_ratio, channels, 1, rng, dtype=dtype)
        self.fc2.weight.data *= 0.5

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.block(gelu(self.norm1(x)))
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))


# aggregation and enhancement -------------------------------------------------------


class AggregatedDepthConv(Module):
    """Fuse stage features: nearest-resample to the smallest map, concat, depthwise 3x3, 1x1 mix."""

    def __init__(self, in_channels, out_channels, rng, dtype=np.float64):
        total = sum(in_channels)
        self.in_channels = tuple(in_channels)
        self.depthwise = param(rng.normal(0, 1 / 3, size=(total, 1, 3, 3)), dtype)
        self.mix = Conv2d(total, out_channels, 1, rng, dtype=dtype)

    def forward(self, features) -> Tensor:
        if not features:
            raise ValueError("aggregated_depth_conv needs at least one feature map")
        if tuple(f.shape[1] for f in features) != self.in_channels:
            raise ShapeError(f"expected channels {self.in_channels}, got {[f.shape[1] for f in features]}")
        hmin = min(f.shape[2] for f in features)
        wmin = min(f.shape[3] for f in features)
        resampled = []
        for f in features:
            fh, fw = f.shape[2] // hmin, f.shape[3] // wmin
            if fh != fw or f.shape[2] % hmin or f.shape[3] % wmin:
                raise ShapeError("feature sizes must be integer multiples of the smallest map")
            resampled.append(F.nearest_downsample(f, fh))
        x = resampled[0] if len(resampled) == 1 else concat(resampled, 1)
        x = F.conv2d(x, self.depthwise, padding=1, groups=x.shape[1])
        return self.mix(x)


def aggregated_depth_conv(features, params: AggregatedDepthConv) -> Tensor:
    return params(features)


def _nmf_init(rows, rank, cols, dtype):
    rng = np.random.default_rng(0)
    return rng.uniform(0.5, 1.5, size=(rows, rank)).astype(dtype), rng.uniform(0.5, 1.5, size=(rank, cols)).astype(dtype)


def nmf_multiplicative(X: Tensor, rank: int, iters: int, eps: float = 1e-10, record: list | None = None) -> Tensor:
    """Low-rank non-negative reconstruction ``D @ C`` of ``X`` (batch, rows, cols).

    Lee-Seung multiplicative updates from a fixed uniform draw; every step stays
    on the gradient graph. Frobenius residuals after each update pair are
    appended to ``record`` when given.
    """
    if rank <= 0:
        raise ValueError(f"rank must be positive, got {rank}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    n, rows, cols = X.shape
    d0, c0 = _nmf_init(rows, rank, cols, X.dtype)
    D = Tensor(np.broadcast_to(d0, (n, rows, rank)).copy())
    C = Tensor(np.broadcast_to(c0, (n, rank, cols)).copy())
    for _ in range(iters):
        Dt = D.transpose(0, 2, 1)
        C = C * matmul(Dt, X) / (matmul(matmul(Dt, D), C) + eps)
        Ct = C.transpose(0, 2, 1)
        D = D * matmul(X, Ct) / (matmul(D, matmul(C, Ct)) + eps)
        if record is not None:
            record.append(float(np.linalg.norm(X.data - D.data @ C.data)))
    return matmul(D, C)


class Hamburger(Module):
    """Global context via NMF of the rectified, flattened map, then a 1x1 conv of ``x + recon``."""

    def __init__(self, channels, rng, rank=2, iters=6, enabled=True, dtype=np.float64):
        self.rank, self.iters, self.enabled = rank, iters, enabled
        self.proj = Conv2d(channels, channels, 1, rng, dtype=dtype) if enabled else None
        if self.proj is not None:
            self.proj.weight.data[:] = np.eye(channels)[:, :, None, None]

    def forward(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        return hamburger_enhance(x, self.rank, self.iters, self.proj)


def hamburger_enhance(x: Tensor, rank: int, iters: int, proj: Conv2d, record: list | None = None) -> Tensor:
    """Returns ``proj(x + NMF_rank(relu(x)))``.

    The rank is capped at ``min(C, H*W) - 1`` (at least 1) so the factorization
    stays low-rank on small maps.
    """
    if rank <= 0:
        raise ValueError(f"rank must be positive, got {rank}")
    n, c, h, w = x.shape
    r = max(1, min(rank, min(c, h * w) - 1))
    X = relu(x).reshape(n, c, h * w)
    recon = nmf_multiplicative(X, r, iters, record=record).reshape(n, c, h, w)
    return proj(x + recon)


# residual blocks -------------------------------------------------------------


class ResidualBlock(Module):
    """1x1 reduce -> 3x3 (strided) -> 1x1 expand, plus a shortcut.

    ``convolution_block``: stride 2 with a 1x1 stride-2 projection shortcut.
    ``bottle_block``: stride 1 with an identity shortcut, optionally passed
    through a :class:`MambaFilter2d`.
    """

    def __init__(self, spec: ResidualBlockSpec, rng, mamba_kwargs=None, dtype=np.float64):
        self.spec = spec
        self.reduce = ConvNormAct(spec.in_channels, spec.mid_channels, 1, rng, dtype=dtype)
        self.spatial = ConvNormAct(spec.mid_channels, spec.mid_channels, 3, rng, stride=spec.stride, dtype=dtype)
        self.expand = Conv2d(spec.mid_channels, spec.out_channels, 1, rng, dtype=dtype)
        self.expand.weight.data *= 0.5
        self.projection = None
        self.filter = None
        if spec.kind == "convolution_block":
            self.projection = Conv2d(spec.in_channels, spec.out_channels, 1, rng, stride=2, dtype=dtype)
        elif spec.shortcut_filter == "mamba":
            self.filter = MambaFilter2d(spec.out_channels, rng, dtype=dtype, **(mamba_kwargs or {}))

    def main(self, x: Tensor) -> Tensor:
        return self.expand(self.spatial(self.reduce(x)))

    def shortcut(self, x: Tensor) -> Tensor:
        if self.projection is not None:
            return self.projection(x)
        return bottle_shortcut(x, self.spec.shortcut_filter, self.filter)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"block expects {self.spec.in_channels} channels, got {x.shape[1]}")
        return self.main(x) + self.shortcut(x)


def residual_block_forward(x: Tensor, spec: ResidualBlockSpec, params: ResidualBlock) -> Tensor:
    if params.spec != spec:
        raise ValueError("parameters were built for a different ResidualBlockSpec")
    return params(x)


# encoder ------------------------------------------------------------------------


class Encoder(Module):
    """Four stages at strides 4, 8, 16, 32.

    Stages 1-2: strided 3x3 downsampling then strip layers. Stages 3-4: a
    convolution block then ``depth - 1`` bottle blocks. The last
    ``fuse_last_n`` stage outputs are aggregated onto the deepest map and
    enhanced; the result is added to the deepest stage.
    """

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float64):
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.stage_channels
        self.stem = [
            ConvNormAct(cfg.in_channels, max(c1 // 2, 1), 3, rng, stride=2, dtype=dtype),
            ConvNormAct(max(c1 // 2, 1), c1, 3, rng, stride=2, act=False, dtype=dtype),
        ]
        self.stage1 = [StripLayer(c1, cfg.branch_kernels, rng, dtype=dtype) for _ in range(cfg.stage_depths[0])]
        self.down2 = ConvNormAct(c1, c2, 3, rng, stride=2, act=False, dtype=dtype)
        self.stage2 = [StripLayer(c2, cfg.branch_kernels, rng, dtype=dtype) for _ in range(cfg.stage_depths[1])]
        mamba_kwargs = {"state_dim": cfg.mamba_state, "heads": cfg.mamba_heads,
                        "directions": ScanDirections(cfg.mamba_directions)}
        self.stage3 = self._residual_stage(c2, c3, cfg.stage_depths[2], rng, mamba_kwargs, dtype)
        self.stage4 = self._residual_stage(c3, c4, cfg.stage_depths[3], rng, mamba_kwargs, dtype)
        fused = cfg.stage_channels[4 - cfg.fuse_last_n :]
        self.aggregate = AggregatedDepthConv(fused, c4, rng, dtype=dtype)
        self.aggregate.mix.weight.data *= 0.5
        self.hamburger = Hamburger(c4, rng, cfg.ham_rank, cfg.ham_iters, enabled=cfg.hamburger, dtype=dtype)

    def _residual_stage(self, c_in, c_out, depth, rng, mamba_kwargs, dtype):
        mid = max(c_out // 4, 1)
        blocks = [ResidualBlock(ResidualBlockSpec(c_in, mid, c_out, "convolution_block", 2), rng, dtype=dtype)]
        flag = "mamba" if self.cfg.mamba else "identity"
        for _ in range(depth - 1):
            spec = ResidualBlockSpec(c_out, mid, c_out, "bottle_block", 1, flag)
            blocks.append(ResidualBlock(spec, rng, mamba_kwargs, dtype=dtype))
        return blocks

    def forward(self, image: Tensor) -> list[Tensor]:
        if image.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected N x {self.cfg.in_channels} x H x W image, got {image.shape}")
        if image.shape[2] % 32 or image.shape[3] % 32:
            raise ShapeError(f"image size {image.shape[2:]} must be divisible by 32")
        x = image
        for layer in self.stem:
            x = layer(x)
        for layer in self.stage1:
            x = layer(x)
        s1 = x
        x = self.down2(x)
        for layer in self.stage2:
            x = layer(x)
        s2 = x
        for block in self.stage3:
            x = block(x)
        s3 = x
        for block in self.stage4:
            x = block(x)
        stages = [s1, s2, s3, x]
        agg = self.aggregate(stages[4 - self.cfg.fuse_last_n :])
        stages[3] = x + self.hamburger(agg)
        return stages


def encoder_forward(image: Tensor, cfg: EncoderConfig, params: Encoder) -> list[Tensor]:
    if params.cfg != cfg:
        raise ValueError("parameters were built for a different config")
    return params(image)
