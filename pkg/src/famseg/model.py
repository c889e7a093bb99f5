"""Full segmentation network and training losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import Decoder, DecoderConfig
from .encoder import Encoder, EncoderConfig
from .functional import one_hot
from .nn import Module
from .tensor import Tensor, log_softmax, softmax

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    dtype: str = "float64"

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        if max(self.decoder.fuse_stages) > len(self.encoder.stage_channels):
            raise ValueError("decoder fuses a stage the encoder does not have")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), DecoderConfig(**d["decoder"]), d.get("dtype", "float64"))


class FAMSeg(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        dtype = DTYPES[self.cfg.dtype]
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(self.cfg.encoder, rng, dtype)
        self.decoder = Decoder(self.cfg.decoder, self.cfg.encoder.stage_channels, rng, dtype)

    def forward(self, image) -> Tensor:
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=DTYPES[self.cfg.dtype]))
        return self.decoder(self.encoder(image))


def segmentation_loss(logits: Tensor, gt: np.ndarray, kind: str = "cross_entropy") -> Tensor:
    """Mean pixel cross-entropy, optionally plus ``1 - mean soft Dice`` over foreground classes."""
    gt = np.asarray(gt)
    n, c, h, w = logits.shape
    if gt.shape != (n, h, w):
        raise ValueError(f"mask shape {gt.shape} does not match logits {logits.shape}")
    if gt.min() < 0 or gt.max() >= c:
        raise ValueError(f"mask values must lie in [0, {c - 1}]")
    target = Tensor(one_hot(gt, c, dtype=logits.dtype))
    ce = -(log_softmax(logits, axis=1) * target).sum() * (1.0 / (n * h * w))
    if kind == "cross_entropy":
        return ce
    if kind == "ce_plus_dice":
        probs = softmax(logits, axis=1)
        inter = (probs * target).sum(axis=(0, 2, 3))
        denom = probs.sum(axis=(0, 2, 3)) + target.sum(axis=(0, 2, 3))
        dice = (inter * 2.0 + 1.0) / (denom + 1.0)
        return ce + (1.0 - dice[1:].mean())
    raise ValueError(f"unknown loss {kind!r}")
