"""A tour of the numpy autodiff engine.

We build a small expression, backpropagate through it, and compare the
result with central finite differences. Then we run the packaged
gradient-check suites, which do the same for every network component.
"""

import numpy as np

from famseg.gradcheck import gradcheck
from famseg.suites import GRADCHECK_SUITES
from famseg.tensor import Tensor, matmul, tanh

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

# loss = sum(tanh(x @ w) ** 2)
loss = (tanh(matmul(x, w)) ** 2).sum()
loss.backward()
print("loss:", float(loss.data))
print("d loss / d w:\n", w.grad)

# The same gradient, checked numerically.
report = gradcheck(lambda a, b: (tanh(matmul(a, b)) ** 2).sum(), [Tensor(x.data), Tensor(w.data)])
print("hand-built expression:", report)

# Every component of the network has a suite; `famseg gradcheck --module all` runs them from the shell.
for name, suite in GRADCHECK_SUITES.items():
    print(f"{name:10s}", suite(tol=1e-4, h=1e-4))
