"""Optimizers, learning-rate policies and the AdamW -> SGD phase schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    """Per-parameter moments plus the shared step counter and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    momentum: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def _check(theta, g):
    if np.shape(theta) != np.shape(g):
        raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {np.shape(theta)}")


def sgd_step(theta: np.ndarray, g: np.ndarray, lr: float, momentum: float = 0.0, buf: np.ndarray | None = None,
             lr_scale=1.0):
    """``theta - lr * g``; with momentum ``b = mu*b + g`` and ``theta - lr * b``.

    Returns ``(theta_new, buf)``.
    """
    _check(theta, g)
    if momentum:
        buf = g.copy() if buf is None else momentum * buf + g
        return theta - lr * lr_scale * buf, buf
    return theta - lr * lr_scale * g, buf


def adam_direction(g, m, v, t, beta1, beta2, eps):
    """Update moments for step ``t`` (already incremented) and return ``(m_hat / (sqrt(v_hat) + eps), m, v)``."""
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return m_hat / (np.sqrt(v_hat) + eps), m, v


def adam_step(theta, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8, lr_scale=1.0):
    _check(theta, g)
    d, m, v = adam_direction(g, m, v, t, beta1, beta2, eps)
    return theta - lr * lr_scale * d, m, v


def adamw_step(theta, g, m, v, t, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8, lr_scale=1.0):
    """Adam update minus ``lr * weight_decay * theta``; decay never enters the moments."""
    _check(theta, g)
    d, m, v = adam_direction(g, m, v, t, beta1, beta2, eps)
    eta = lr * lr_scale
    return theta - eta * d - eta * weight_decay * theta, m, v


class AdadeltaRate:
    """Per-element step size ``RMS[dx]_{t-1} / RMS[g]_t`` from running squared averages."""

    def __init__(self, shapes, rho=0.95, eps=1e-6):
        self.rho, self.eps = rho, eps
        self.eg2 = [np.zeros(s) for s in shapes]
        self.edx2 = [np.zeros(s) for s in shapes]

    def rate(self, i, g):
        self.eg2[i] = self.rho * self.eg2[i] + (1 - self.rho) * g * g
        return np.sqrt(self.edx2[i] + self.eps) / np.sqrt(self.eg2[i] + self.eps)

    def record(self, i, dx):
        self.edx2[i] = self.rho * self.edx2[i] + (1 - self.rho) * dx * dx


class Optimizer:
    """Steps a list of parameter Tensors in place from their ``.grad``.

    ``kind`` is one of ``sgd``, ``adam``, ``adamw``, ``adadelta``. With
    ``adaptive_rate=True`` the global learning rate is replaced per element by
    the Adadelta RMS ratio. ``decay_mask`` (one bool per parameter) limits
    AdamW's weight decay to the flagged parameters.
    """

    KINDS = ("sgd", "adam", "adamw", "adadelta")

    def __init__(self, params, kind="adamw", lr=1e-3, weight_decay=0.01, momentum=0.0,
                 betas=(0.9, 0.999), eps=1e-8, adaptive_rate=False, decay_mask=None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown optimizer kind {kind!r}")
        self.params = list(params)
        self.kind = kind
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay, momentum=momentum)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]
        self.buffers: list = [None] * len(self.params)
        self.decay_mask = [True] * len(self.params) if decay_mask is None else list(decay_mask)
        if len(self.decay_mask) != len(self.params):
            raise ValueError("decay_mask needs one entry per parameter")
        use_rate = adaptive_rate or kind == "adadelta"
        self.rate = AdadeltaRate([p.shape for p in self.params]) if use_rate else None

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        self.state.lr = float(value)

    def step(self, grads=None):
        st = self.state
        st.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if grads is None else grads[i]
            if g is None:
                continue
            scale = self.rate.rate(i, g) if self.rate is not None else 1.0
            lr = 1.0 if self.kind == "adadelta" else st.lr
            old = p.data
            if self.kind in ("sgd", "adadelta"):
                new, self.buffers[i] = sgd_step(old, g, lr, st.momentum, self.buffers[i], scale)
            elif self.kind == "adam":
                new, st.m[i], st.v[i] = adam_step(old, g, st.m[i], st.v[i], st.t, lr, st.beta1, st.beta2, st.eps, scale)
            else:
                wd = st.weight_decay if self.decay_mask[i] else 0.0
                new, st.m[i], st.v[i] = adamw_step(old, g, st.m[i], st.v[i], st.t, lr, wd,
                                                   st.beta1, st.beta2, st.eps, scale)
            if self.rate is not None:
                self.rate.record(i, new - old)
            p.data = new.astype(old.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict:
        out = {}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.state.m[i]
            out[f"v.{i}"] = self.state.v[i]
            if self.buffers[i] is not None:
                out[f"buf.{i}"] = self.buffers[i]
            if self.rate is not None:
                out[f"eg2.{i}"] = self.rate.eg2[i]
                out[f"edx2.{i}"] = self.rate.edx2[i]
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        self.state.t = t
        for i in range(len(self.params)):
            self.state.m[i] = arrays[f"m.{i}"].copy()
            self.state.v[i] = arrays[f"v.{i}"].copy()
            self.buffers[i] = arrays[f"buf.{i}"].copy() if f"buf.{i}" in arrays else None
            if self.rate is not None:
                self.rate.eg2[i] = arrays[f"eg2.{i}"].copy()
                self.rate.edx2[i] = arrays[f"edx2.{i}"].copy()


# learning-rate policy ----------------------------------------------------------


def lr_fit(batch_size, init_lr, min_lr, lr_limit_max, lr_limit_min) -> tuple[float, float]:
    """Scale the max/min learning rates by ``batch_size / 64`` and clamp.

    The initial rate is clamped to ``[lr_limit_min, lr_limit_max]``, the
    minimum rate to the same limits divided by 100.
    """
    if min(batch_size, init_lr, min_lr, lr_limit_max, lr_limit_min) <= 0:
        raise ValueError("lr_fit arguments must be positive")
    init_fit = min(max(batch_size / 64 * init_lr, lr_limit_min), lr_limit_max)
    min_fit = min(max(batch_size / 64 * min_lr, lr_limit_min / 100), lr_limit_max / 100)
    return init_fit, min_fit


DECAYS = ("cosine", "step", "adadelta")


def decay_lr(kind: str, epoch: int, total_epochs: int, lr_max: float, lr_min: float) -> float:
    """Global learning rate for ``epoch`` in ``[0, total_epochs)``.

    ``step`` multiplies by 0.1 at 60% and again at 85% of the epochs.
    ``adadelta`` holds ``lr_max``; the per-element rate is applied by the optimizer.
    """
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if kind == "cosine":
        return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * epoch / total_epochs))
    if kind == "step":
        lr = lr_max
        for milestone in (0.6, 0.85):
            if epoch >= math.ceil(milestone * total_epochs):
                lr *= 0.1
        return lr
    if kind == "adadelta":
        return lr_max
    raise ValueError(f"unknown decay {kind!r}")


@dataclass
class Phase:
    optimizer: str
    epochs: int
    decay: str = "cosine"
    lr_max: float | None = None
    lr_min: float | None = None

    def __post_init__(self):
        if self.optimizer not in Optimizer.KINDS:
            raise ValueError(f"unknown optimizer kind {self.optimizer!r}")
        if self.decay not in DECAYS:
            raise ValueError(f"unknown decay {self.decay!r}")
        if self.epochs < 1:
            raise ValueError("each phase needs at least one epoch")


@dataclass
class Schedule:
    phases: tuple = (Phase("adamw", 15), Phase("sgd", 5))
    init_lr: float = 0.01
    min_lr: float = 0.0001
    lr_limit_max: float = 0.001
    lr_limit_min: float = 0.0001
    batch_size: int = 8
    weight_decay: float = 0.01
    momentum: float = 0.9
    decay_vectors: bool = False  # apply weight decay to 1-d parameters (norm scales, biases) too

    def __post_init__(self):
        self.phases = tuple(p if isinstance(p, Phase) else Phase(**p) for p in self.phases)
        if not self.phases:
            raise ValueError("schedule needs at least one phase")
        if not self.init_lr >= self.min_lr > 0:
            raise ValueError("need init_lr >= min_lr > 0")

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)

    def fitted_range(self) -> tuple[float, float]:
        return lr_fit(self.batch_size, self.init_lr, self.min_lr, self.lr_limit_max, self.lr_limit_min)

    def locate(self, epoch: int) -> tuple[int, int]:
        """Map a global epoch to ``(phase index, epoch within phase)``."""
        start = 0
        for i, p in enumerate(self.phases):
            if epoch < start + p.epochs:
                return i, epoch - start
            start += p.epochs
        raise ValueError(f"epoch {epoch} beyond schedule of {self.total_epochs}")

    def lr_at(self, epoch: int) -> float:
        i, e = self.locate(epoch)
        p = self.phases[i]
        hi, lo = self.fitted_range()
        return decay_lr(p.decay, e, p.epochs, p.lr_max if p.lr_max is not None else hi,
                        p.lr_min if p.lr_min is not None else lo)

    def make_optimizer(self, phase_index: int, params) -> Optimizer:
        p = self.phases[phase_index]
        momentum = self.momentum if p.optimizer == "sgd" else 0.0
        params = list(params)
        mask = [self.decay_vectors or np.ndim(q.data) > 1 for q in params]
        return Optimizer(params, p.optimizer, lr=self.lr_at(sum(q.epochs for q in self.phases[:phase_index])),
                         weight_decay=self.weight_decay, momentum=momentum, adaptive_rate=p.decay == "adadelta",
                         decay_mask=mask)


def alternate_train(schedule: Schedule, params, loss_and_grad, batches_for_epoch, on_epoch=None,
                    start_epoch: int = 0, restore=None) -> list[dict]:
    """Run the phases in order from ``start_epoch``.

    A fresh optimizer is built at every phase start, so moments never carry
    over from AdamW into SGD; parameters are untouched by the switch.
    ``loss_and_grad(batch)`` returns ``(loss, grads)`` and
    ``batches_for_epoch(epoch)`` yields batches. ``on_epoch(epoch, record,
    optimizer)`` may add fields to the epoch's log record. ``restore(optimizer)``
    is called once on the optimizer of the resumed phase.
    """
    params = list(params)
    log = []
    epoch = start_epoch
    first_phase, _ = schedule.locate(start_epoch) if start_epoch < schedule.total_epochs else (len(schedule.phases), 0)
    for pi in range(first_phase, len(schedule.phases)):
        phase = schedule.phases[pi]
        opt = schedule.make_optimizer(pi, params)
        if restore is not None and pi == first_phase:
            restore(opt)
        end = sum(p.epochs for p in schedule.phases[: pi + 1])
        while epoch < end:
            opt.lr = schedule.lr_at(epoch)
            losses = []
            for batch in batches_for_epoch(epoch):
                loss, grads = loss_and_grad(batch)
                opt.step(grads)
                losses.append(loss)
            rec = {"epoch": epoch, "phase": pi, "optimizer": phase.optimizer, "lr": opt.lr,
                   "train_loss": float(np.mean(losses))}
            if on_epoch is not None:
                on_epoch(epoch, rec, opt)
            log.append(rec)
            epoch += 1
    return log
