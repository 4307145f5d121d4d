"""Learner losses: weight training and the (normalized) weighted test loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lpt import autodiff as ad
from lpt.autodiff import DifferentiableFn, ParamVector
from lpt.data import Dataset
from lpt.errors import BadArgument, DegenerateTest
from lpt.optim import SGD, Adam
from lpt.search_space import SuperNet

# below this soft test size the normalized loss is undefined
EPS_CARD = 1e-6


def per_example_loss(net: SuperNet, A, W, batch: Dataset) -> ad.Var:
    logits = net.forward(A, W, batch.inputs)
    return ad.cross_entropy(logits, batch.labels)


def train_loss(net: SuperNet, A, W, batch: Dataset) -> ad.Var:
    if len(batch) == 0:
        raise BadArgument("empty training batch")
    return ad.mean(per_example_loss(net, A, W, batch))


def weighted_sum(weights, losses) -> ad.Var:
    """``sum_d f(d) * loss(d)``."""
    weights, losses = ad._as_var(weights), ad._as_var(losses)
    if weights.shape != losses.shape:
        raise BadArgument(f"{weights.shape[0]} weights for {losses.shape[0]} examples")
    return ad.vsum(ad.mul(weights, losses))


def normalized(weights, losses, eps=EPS_CARD) -> ad.Var:
    """``sum f*loss / sum f``; raises DegenerateTest when ``sum f <= eps``."""
    weights = ad._as_var(weights)
    card = ad.vsum(weights)
    if not float(card.value) > eps:
        raise DegenerateTest(f"soft test size {float(card.value):.3g} <= {eps}")
    return ad.div(weighted_sum(weights, losses), card)


def _check_weights(weights, bank):
    weights = np.asarray(weights)
    if weights.shape != (len(bank),):
        raise BadArgument(f"{weights.shape} weights for a bank of {len(bank)}")
    if np.any(weights < 0) or np.any(weights > 1):
        raise BadArgument("selection weights must lie in [0, 1]")
    return weights


def weighted_test_loss(net, A, W, weights, bank: Dataset) -> float:
    weights = _check_weights(weights, bank)
    losses = per_example_loss(net, A, W, bank)
    return float(weighted_sum(weights.astype(losses.dtype), losses).value)


def normalized_test_loss(net, A, W, weights, bank: Dataset) -> float:
    weights = _check_weights(weights, bank)
    losses = per_example_loss(net, A, W, bank)
    return float(normalized(weights.astype(losses.dtype), losses).value)


def train_loss_fn(net: SuperNet) -> DifferentiableFn:
    return DifferentiableFn(("A", "W"), lambda p, batch: train_loss(net, p["A"], p["W"], batch))


def test_loss_fn(net: SuperNet, weights) -> DifferentiableFn:
    """Normalized weighted test loss of (A, W) with the selection weights held fixed."""
    weights = np.asarray(weights)

    def rule(p, bank):
        losses = per_example_loss(net, p["A"], p["W"], bank)
        return normalized(weights.astype(losses.dtype), losses)

    return DifferentiableFn(("A", "W"), rule)


@dataclass
class LearnerState:
    net: SuperNet
    A: ParamVector
    W: ParamVector
    w_opt: SGD = field(default_factory=SGD)
    a_opt: Adam = field(default_factory=lambda: Adam(lr=3e-4, betas=(0.5, 0.999), weight_decay=1e-3))
    last_train_loss: float = float("nan")

    @classmethod
    def create(cls, net: SuperNet, rng, dtype=np.float64, w_opt=None, a_opt=None) -> "LearnerState":
        state = cls(net, ParamVector(net.init_arch(dtype)), ParamVector(net.init_weights(rng, dtype)))
        if w_opt is not None:
            state.w_opt = w_opt
        if a_opt is not None:
            state.a_opt = a_opt
        return state

    def blocks(self) -> dict:
        return {"A": self.A, "W": self.W}


def weights_step(state: LearnerState, batch: Dataset, lr: float | None = None) -> LearnerState:
    """One momentum-SGD step on the training loss; A is untouched. Mutates and returns ``state``."""
    loss, grads = ad.value_and_grad(train_loss_fn(state.net), state.blocks(), batch, ("W",))
    state.W = state.w_opt.step(state.W, grads["W"], lr)
    state.last_train_loss = loss
    return state
