"""Tester: shared data encoder E, test creator C, target-task executor X.

The creator scores each bank example from its encoding. With
``label_aware`` (the default) the creator keeps one weight row per class and
scores ``encode(x) . C[y] + c[y]``, so it can tell an example whose label
disagrees with its input from a clean one; otherwise it is a single
``latent -> 1`` layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lpt import autodiff as ad
from lpt.autodiff import DifferentiableFn, ParamVector
from lpt.data import Dataset
from lpt.errors import BadArgument
from lpt.optim import SGD, Adam
from lpt.search_space import Layout


class TesterNet:
    def __init__(self, input_dim, num_classes, hidden=16, latent=8, image_shape=None, label_aware=True):
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.hidden = int(hidden)
        self.latent = int(latent)
        self.image_shape = tuple(image_shape) if image_shape is not None else None
        self.label_aware = bool(label_aware)

        self.enc = Layout()
        if self.image_shape:
            ch = self.image_shape[0]
            self.enc.add("K1", (self.hidden, ch, 3, 3), fan_in=9 * ch)
            self.enc.add("b1", (self.hidden,))
            self.enc.add("K2", (self.latent, self.hidden, 3, 3), fan_in=9 * self.hidden)
            self.enc.add("b2", (self.latent,))
        else:
            self.enc.add("M1", (self.input_dim, self.hidden), fan_in=self.input_dim)
            self.enc.add("b1", (self.hidden,))
            self.enc.add("M2", (self.hidden, self.latent), fan_in=self.hidden)
            self.enc.add("b2", (self.latent,))

        self.cre = Layout()
        rows = self.num_classes if self.label_aware else 1
        self.cre.add("w", (rows, self.latent))
        self.cre.add("b", (rows,))

        self.exe = Layout()
        self.exe.add("M", (self.latent, self.num_classes), fan_in=self.latent)
        self.exe.add("b", (self.num_classes,))

    def init(self, rng, dtype=np.float64):
        """(E, C, X) initial values; C starts at zero so every weight is 0.5."""
        E = ParamVector(self.enc.init(rng, dtype))
        C = ParamVector(np.zeros(self.cre.size, dtype=dtype))
        X = ParamVector(self.exe.init(rng, dtype))
        return E, C, X

    def encode(self, E, x) -> ad.Var:
        E = ad._as_var(E.values if isinstance(E, ParamVector) else E)
        p = self.enc.unpack(E)
        x = np.asarray(x, dtype=E.dtype)
        if self.image_shape:
            xi = ad.const(x.reshape((x.shape[0],) + self.image_shape))
            h = ad.tanh(ad.conv3x3(xi, p["K1"]) + ad.reshape(p["b1"], (1, -1, 1, 1)))
            h = ad.tanh(ad.conv3x3(h, p["K2"]) + ad.reshape(p["b2"], (1, -1, 1, 1)))
            n, c = h.shape[:2]
            return ad.mean(ad.reshape(h, (n, c, -1)), axis=2)
        h = ad.tanh(ad.matmul(ad.const(x), p["M1"]) + p["b1"])
        return ad.tanh(ad.matmul(h, p["M2"]) + p["b2"])

    def creator_logit(self, C, h: ad.Var, labels) -> ad.Var:
        C = ad._as_var(C.values if isinstance(C, ParamVector) else C)
        p = self.cre.unpack(C)
        rows = np.asarray(labels, dtype=np.int64) if self.label_aware else np.zeros(h.shape[0], dtype=np.int64)
        return ad.vsum(ad.mul(h, p["w"][rows]), axis=1) + p["b"][rows]

    def executor_logits(self, X, h: ad.Var) -> ad.Var:
        X = ad._as_var(X.values if isinstance(X, ParamVector) else X)
        p = self.exe.unpack(X)
        return ad.matmul(h, p["M"]) + p["b"]


def selection_weights(tnet: TesterNet, E, C, batch: Dataset) -> ad.Var:
    """Relaxed membership ``f(d, C, E) = sigmoid(creator(encode(d)))`` for each example."""
    return ad.sigmoid(tnet.creator_logit(C, tnet.encode(E, batch.inputs), batch.labels))


def selection_weight(tnet: TesterNet, E, C, d) -> float:
    x = np.asarray(d.input, dtype=np.float64).reshape(1, -1)
    batch = Dataset([d.id], x, [d.label], tnet.num_classes, image_shape=tnet.image_shape)
    return float(selection_weights(tnet, E, C, batch).value[0])


def executor_losses(tnet: TesterNet, E, X, batch: Dataset) -> ad.Var:
    return ad.cross_entropy(tnet.executor_logits(X, tnet.encode(E, batch.inputs)), batch.labels)


def bank_term(tnet: TesterNet, E, X, C, bank: Dataset) -> ad.Var:
    """``sum_d f(d, C, E) * loss(E, X, d)`` over the bank batch."""
    h = tnet.encode(E, bank.inputs)
    f = ad.sigmoid(tnet.creator_logit(C, h, bank.labels))
    losses = ad.cross_entropy(tnet.executor_logits(X, h), bank.labels)
    return ad.vsum(ad.mul(f, losses))


def val_loss(tnet: TesterNet, E, X, batch: Dataset) -> ad.Var:
    if len(batch) == 0:
        raise BadArgument("empty validation batch")
    return ad.mean(executor_losses(tnet, E, X, batch))


def stage2_loss(tnet: TesterNet, E, X, C, tt_batch: Dataset, bank: Dataset, gamma: float) -> ad.Var:
    """Tester training loss: mean loss on tester-train plus ``gamma`` times the bank term."""
    if gamma < 0:
        raise BadArgument("gamma must be non-negative")
    base = ad.mean(executor_losses(tnet, E, X, tt_batch))
    if gamma == 0:
        return base
    return ad.add(base, ad.mul(bank_term(tnet, E, X, C, bank), gamma))


def ablation2_stage2(tnet: TesterNet, E, X, C, bank: Dataset, gamma: float) -> ad.Var:
    """Tester loss built from the created test alone."""
    if gamma < 0:
        raise BadArgument("gamma must be non-negative")
    return ad.mul(bank_term(tnet, E, X, C, bank), gamma)


def ablation1_selection(s) -> ad.Var:
    """Per-example selection scalars in (0, 1) from raw, unconstrained parameters."""
    return ad.sigmoid(ad._as_var(s.values if isinstance(s, ParamVector) else s))


# ---------------------------------------------------------------- DifferentiableFn views
# batch conventions: stage2 -> (tt_batch, bank); bank_term -> bank; val -> val batch


def stage2_fn(tnet: TesterNet, gamma: float, test_only=False) -> DifferentiableFn:
    if test_only:
        return DifferentiableFn(("E", "X", "C"), lambda p, b: ablation2_stage2(tnet, p["E"], p["X"], p["C"], b[1], gamma))
    return DifferentiableFn(("E", "X", "C"), lambda p, b: stage2_loss(tnet, p["E"], p["X"], p["C"], b[0], b[1], gamma))


def bank_term_fn(tnet: TesterNet) -> DifferentiableFn:
    return DifferentiableFn(("E", "X", "C"), lambda p, bank: bank_term(tnet, p["E"], p["X"], p["C"], bank))


def val_fn(tnet: TesterNet) -> DifferentiableFn:
    return DifferentiableFn(("E", "X"), lambda p, batch: val_loss(tnet, p["E"], p["X"], batch))


@dataclass
class TesterState:
    tnet: TesterNet
    E: ParamVector
    C: ParamVector
    X: ParamVector
    e_opt: SGD = field(default_factory=SGD)
    x_opt: SGD = field(default_factory=SGD)
    c_opt: Adam = field(default_factory=lambda: Adam(lr=3e-4, weight_decay=1e-3))
    s: ParamVector | None = None  # raw selection scalars (difficulty-only ablation)

    @classmethod
    def create(cls, tnet: TesterNet, rng, dtype=np.float64, bank_size=None) -> "TesterState":
        E, C, X = tnet.init(rng, dtype)
        s = ParamVector(np.zeros(bank_size, dtype=dtype)) if bank_size else None
        return cls(tnet, E, C, X, s=s)

    def blocks(self) -> dict:
        return {"E": self.E, "X": self.X, "C": self.C}
