"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


class NondeterminismError(RuntimeError):
    pass


@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    checked: int
    per_input: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.0e} elements={self.checked}"


def _scalar(f, inputs) -> float:
    out = f(*inputs)
    if isinstance(out, Tensor):
        out = out.data
    out = np.asarray(out)
    if out.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {out.shape}")
    return float(out.reshape(()))


def gradcheck(f: Callable, inputs, h: float = 1e-4, tol: float = 1e-4, max_elements: int | None = None,
              seed: int = 0) -> GradcheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of an element is ``|a - n| / max(|a|, |n|, floor)`` where
    ``floor`` is ``1e-3`` times the largest gradient magnitude over all checked
    entries, so entries that are tiny relative to the rest are judged on
    absolute error instead of amplifying rounding noise.
    ``max_elements`` caps how many entries per input are perturbed (chosen at
    random with ``seed``).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck requires float64 inputs")
        t.requires_grad = True

    out = f(*inputs)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("gradcheck needs f to return a scalar Tensor")
    again = _scalar(f, inputs)
    if again != float(out.data.reshape(())):
        raise NondeterminismError("f returned different values for identical inputs")
    analytic = grad(out, inputs)

    rng = np.random.default_rng(seed)
    pairs = []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f, inputs)
            flat[i] = orig - h
            fm = _scalar(f, inputs)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * h)
        pairs.append((a.reshape(-1)[idx], numeric))

    scale = max((max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs), default=0.0)
    floor = max(1e-3 * scale, 1e-12)
    per_input = []
    for a, n in pairs:
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        per_input.append(float((np.abs(a - n) / denom).max(initial=0.0)))
    worst = max(per_input, default=0.0)
    checked = sum(a.size for a, _ in pairs)
    return GradcheckReport(worst, tol, checked, per_input)


def check_module(module, loss_fn: Callable, h=1e-4, tol=1e-4, max_elements=None, seed=0,
                 extra_inputs: Sequence[Tensor] = ()) -> GradcheckReport:
    """Gradcheck ``loss_fn()`` with respect to every parameter of ``module`` plus ``extra_inputs``."""
    params = list(module.parameters()) + list(extra_inputs)

    def f(*_):
        return loss_fn()

    return gradcheck(f, params, h=h, tol=tol, max_elements=max_elements, seed=seed)
