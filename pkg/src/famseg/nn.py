"""Parameter containers and the few layers every block shares."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import functional as F
from .tensor import Tensor, gelu


def norm_groups(channels: int, max_groups: int = 8) -> int:
    """Largest group count <= ``max_groups`` that divides ``channels``."""
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class Module:
    """Base class; parameters are Tensor attributes with ``requires_grad``.

    Attribute insertion order fixes parameter order, so two modules built from
    the same config and seed enumerate identical names.
    """

    dtype = np.float64

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=None, groups=1, bias=True, dtype=np.float64):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = (c_in // groups) * kh * kw
        std = np.sqrt(2.0 / fan_in)
        self.weight = param(rng.normal(0.0, std, size=(c_out, c_in // groups, kh, kw)), dtype)
        self.bias = param(np.zeros(c_out), dtype) if bias else None
        self.stride = stride
        self.padding = (kh // 2, kw // 2) if padding is None else padding
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class GroupNorm(Module):
    def __init__(self, channels, dtype=np.float64):
        self.groups = norm_groups(channels)
        self.gamma = param(np.ones(channels), dtype)
        self.beta = param(np.zeros(channels), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.gamma, self.beta)


class ConvNormAct(Module):
    """conv -> group norm -> GELU."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, act=True, dtype=np.float64):
        self.conv = Conv2d(c_in, c_out, kernel, rng, stride=stride, bias=False, dtype=dtype)
        self.norm = GroupNorm(c_out, dtype)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.conv(x))
        return gelu(y) if self.act else y
