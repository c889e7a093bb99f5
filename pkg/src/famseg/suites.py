"""Fixed finite-difference suites for each network component.

Every suite builds a small double-precision instance from a pinned seed and
checks a random linear probe of its output (or the training loss for the
full model) against central differences. The full-model suite perturbs a
random subset of entries per tensor to stay within a few minutes on one core.
"""

from __future__ import annotations

import numpy as np

from .decoder import DecoderConfig, FamSpec, FAMUpsample
from .encoder import EncoderConfig, Hamburger, StripLayer
from .gradcheck import GradcheckReport, check_module
from .mamba import MambaFilter2d
from .model import FAMSeg, ModelConfig, segmentation_loss
from .tensor import Tensor

TINY_MODEL = ModelConfig(EncoderConfig(stage_channels=(8, 8, 16, 16), stage_depths=(1, 1, 2, 2), mamba_state=4),
                         DecoderConfig(refine_channels=8, num_classes=2))


def _probe(module, x: Tensor, rng, **kw) -> GradcheckReport:
    out_shape = module(x).shape
    weights = Tensor(rng.normal(size=out_shape))
    return check_module(module, lambda: (module(x) * weights).sum(), extra_inputs=[x], **kw)


def strip_suite(tol=1e-4, h=1e-4, seed=0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    layer = StripLayer(4, (3, 7), rng)
    return _probe(layer, Tensor(rng.normal(size=(2, 4, 8, 8))), rng, tol=tol, h=h)


def mamba_suite(tol=1e-4, h=1e-4, seed=0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    filt = MambaFilter2d(8, rng, state_dim=4, heads=2)
    # the residual projection starts at zero; give it weight so its path is exercised
    filt.out_proj.weight.data[:] = rng.normal(0, 0.3, size=filt.out_proj.weight.shape)
    return _probe(filt, Tensor(rng.normal(size=(2, 8, 4, 4))), rng, tol=tol, h=h)


def fam_suite(tol=1e-4, h=1e-4, seed=0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    fam = FAMUpsample(FamSpec(8, k_up=3, k_enc=3, scale=2), rng)
    fam.encode.weight.data *= 10.0  # undo the small init so kernels are far from uniform
    return _probe(fam, Tensor(rng.normal(size=(2, 8, 4, 4))), rng, tol=tol, h=h)


def hamburger_suite(tol=1e-4, h=1e-4, seed=0) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    ham = Hamburger(8, rng, rank=2, iters=4)
    ham.proj.weight.data += rng.normal(0, 0.2, size=ham.proj.weight.shape)
    return _probe(ham, Tensor(rng.normal(size=(2, 8, 4, 4))), rng, tol=tol, h=h)


def full_suite(tol=1e-4, h=1e-4, seed=0, max_elements=4) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    model = FAMSeg(TINY_MODEL, seed=seed)
    x = Tensor(rng.uniform(size=(1, 3, 64, 64)))
    gt = rng.integers(0, TINY_MODEL.decoder.num_classes, size=(1, 64, 64))
    return check_module(model, lambda: segmentation_loss(model(x), gt), h=h, tol=tol, max_elements=max_elements,
                        seed=seed, extra_inputs=[x])


GRADCHECK_SUITES = {
    "strip": strip_suite,
    "mamba": mamba_suite,
    "fam": fam_suite,
    "hamburger": hamburger_suite,
    "full": full_suite,
}
