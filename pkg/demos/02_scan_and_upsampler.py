"""Two building blocks and the closed forms they must satisfy.

Selective scan: the linear-time recurrence is checked against an explicit
O(L^2) sum over every past token.

Content-aware upsampler: with all kernel logits zero, each output pixel is
a plain average over its source neighbourhood. With one dominant logit at
the centre tap, it becomes nearest-neighbour upsampling.
"""

import numpy as np

from famseg import functional as F
from famseg.decoder import FamSpec, FAMUpsample
from famseg.mamba import scan_oracle, selective_scan
from famseg.tensor import Tensor

rng = np.random.default_rng(1)

L, heads, per_head, state = 24, 2, 3, 8
x = rng.normal(size=(L, heads * per_head))
a = rng.uniform(0.2, 0.95, size=(L, heads))
B, C = rng.normal(size=(L, state)), rng.normal(size=(L, state))
D = rng.normal(size=heads)
y = selective_scan(*(Tensor(v) for v in (x, a, B, C, D))).data
print(f"scan vs quadratic sum, L={L}: max |diff| = {np.max(np.abs(y - scan_oracle(x, a, B, C, D))):.1e}")

# Decay near zero leaves only the current token.
a0 = np.full((L, heads), 1e-300)
y0 = selective_scan(*(Tensor(v) for v in (x, a0, B, C, D))).data
memoryless = (np.sum(B * C, axis=1)[:, None] + np.repeat(D, per_head)[None]) * x
print(f"memoryless scan vs closed form: {np.max(np.abs(y0 - memoryless)):.1e}")

fam = FAMUpsample(FamSpec(8, k_up=5), rng)
feat = rng.normal(size=(1, 8, 6, 6))
fam.encode.weight.data[:] = 0.0
fam.encode.bias.data[:] = 0.0
padded = np.pad(feat, ((0, 0), (0, 0), (2, 2), (2, 2)))
box = sum(padded[:, :, i:i + 6, j:j + 6] for i in range(5) for j in range(5)) / 25
out = fam(Tensor(feat)).data
print(f"uniform kernels vs 5x5 box + nearest: {np.max(np.abs(out - box.repeat(2, 2).repeat(2, 3))):.1e}")

logits = np.zeros((25, 4))
logits[12] = 40.0  # tap 12 is the centre of a 5x5 window
fam.encode.bias.data[:] = logits.reshape(-1)
near = F.nearest_upsample(Tensor(feat), 2).data
print(f"centre-delta kernels vs nearest upsampling: {np.max(np.abs(fam(Tensor(feat)).data - near)):.1e}")

# Learned kernels always sum to one at every output location.
fam = FAMUpsample(FamSpec(8, k_up=5), rng)
k = fam.kernels(Tensor(rng.normal(size=(1, 8, 4, 4)))).data
print(f"kernel sums lie in [{k.sum(axis=1).min():.16f}, {k.sum(axis=1).max():.16f}]")
