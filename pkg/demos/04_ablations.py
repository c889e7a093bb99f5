"""What the two ablation switches actually remove.

`mamba = off` turns every filtered Bottle block shortcut back into a plain
identity. `fusion = off` stops the decoder from adding skip features, so the
prediction is built from the deepest stage alone. We count parameters, then
perturb an early stage to see whether the logits notice.
"""

from dataclasses import replace

import numpy as np

from famseg.model import FAMSeg, ModelConfig
from famseg.tensor import Tensor

base = ModelConfig()
variants = {
    "default": base,
    "mamba off": replace(base, encoder=replace(base.encoder, mamba=False)),
    "fusion off": replace(base, decoder=replace(base.decoder, fusion=False)),
}

x = np.random.default_rng(0).uniform(size=(1, 3, 64, 64))
for name, cfg in variants.items():
    model = FAMSeg(cfg, seed=0)
    names = [n for n, _ in model.named_parameters()]
    scan_params = sum(p.data.size for n, p in model.named_parameters() if ".filter." in n)
    stages = model.encoder(Tensor(x))
    logits = model.decoder(stages).data
    # nudge the stride-8 features and decode again
    stages[1] = Tensor(stages[1].data + 1.0)
    moved = np.max(np.abs(model.decoder(stages).data - logits))
    print(f"{name:10s} params {model.num_parameters():7d}  scan-filter params {scan_params:6d}  "
          f"tensors {len(names):3d}  logit change from stage-2 nudge {moved:.3f}")
