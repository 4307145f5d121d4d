"""SGD-momentum and Adam on ParamVectors, plus the cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lpt.autodiff import ParamVector
from lpt.errors import NonFiniteLoss


def cosine_lr(base_lr: float, epoch: int, total_epochs: int, min_lr: float = 0.0) -> float:
    t = min(max(epoch, 0), total_epochs)
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * t / max(total_epochs, 1)))


def _finite(vec: np.ndarray, what: str):
    if not np.all(np.isfinite(vec)):
        raise NonFiniteLoss(f"non-finite {what}")


@dataclass
class SGD:
    """Momentum SGD with coupled weight decay (decay added to the gradient)."""

    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    buf: np.ndarray | None = None
    steps: int = 0

    def step(self, params: ParamVector, grad: ParamVector, lr: float | None = None) -> ParamVector:
        lr = self.lr if lr is None else lr
        p = params.values
        d = grad.values + p.dtype.type(self.weight_decay) * p
        _finite(d, "gradient")
        if self.buf is None or self.momentum == 0:
            self.buf = d.copy()
        else:
            self.buf = p.dtype.type(self.momentum) * self.buf + d
        self.steps += 1
        return ParamVector(p - p.dtype.type(lr) * self.buf)

    def state(self) -> dict:
        return {"buf": None if self.buf is None else self.buf.copy(), "steps": self.steps}


@dataclass
class Adam:
    """Adam with coupled L2 weight decay."""

    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    steps: int = 0

    def step(self, params: ParamVector, grad: ParamVector, lr: float | None = None) -> ParamVector:
        lr = self.lr if lr is None else lr
        p = params.values
        t = p.dtype.type
        g = grad.values + t(self.weight_decay) * p
        _finite(g, "gradient")
        if self.m is None:
            self.m = np.zeros_like(p)
            self.v = np.zeros_like(p)
        b1, b2 = self.betas
        self.steps += 1
        self.m = t(b1) * self.m + t(1 - b1) * g
        self.v = t(b2) * self.v + t(1 - b2) * g * g
        mhat = self.m / t(1 - b1**self.steps)
        vhat = self.v / t(1 - b2**self.steps)
        return ParamVector(p - t(lr) * mhat / (np.sqrt(vhat) + t(self.eps)))

    def state(self) -> dict:
        return {
            "m": None if self.m is None else self.m.copy(),
            "v": None if self.v is None else self.v.copy(),
            "steps": self.steps,
        }


@dataclass
class OptimizerSettings:
    kind: str = "sgd"
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    betas: tuple = (0.9, 0.999)
    min_lr: float = 0.0
    cosine: bool = True

    def build(self):
        if self.kind == "sgd":
            return SGD(self.lr, self.momentum, self.weight_decay)
        if self.kind == "adam":
            return Adam(self.lr, tuple(self.betas), weight_decay=self.weight_decay)
        raise ValueError(f"unknown optimizer kind {self.kind!r}")

    def lr_at(self, epoch: int, total_epochs: int) -> float:
        if not self.cosine:
            return self.lr
        return cosine_lr(self.lr, epoch, total_epochs, self.min_lr)
