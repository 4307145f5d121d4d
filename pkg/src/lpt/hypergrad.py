"""One-step unrolled hypergradients with finite-difference second-order terms.

Conventions: ``fd_coefficient`` turns a direction ``v`` into the probe size
``alpha = fd_epsilon_scale / ||v||``. A mixed second derivative contracted
with ``v`` is estimated as ``(grad(x + alpha v) - grad(x - alpha v)) / 2 alpha``.
When ``v`` vanishes the estimate is taken as zero.

``PROBES`` counts the gradient evaluations spent on such estimates, keyed by
the quantity being estimated.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from lpt import autodiff as ad
from lpt.autodiff import DifferentiableFn, ParamVector
from lpt.errors import BadArgument, DegenerateTest, ZeroDirection
from lpt.learner import EPS_CARD, per_example_loss, test_loss_fn, train_loss_fn
from lpt.tester import bank_term_fn, stage2_fn, val_fn

log = logging.getLogger(__name__)

PROBES: Counter = Counter()
ZERO_NORM = 1e-12


@dataclass(frozen=True)
class UnrollConfig:
    xi_ln: float = 0.025
    xi_E: float = 0.025
    xi_X: float = 0.025
    fd_epsilon_scale: float = 0.01
    first_order: bool = False

    def __post_init__(self):
        if min(self.xi_ln, self.xi_E, self.xi_X) < 0:
            raise BadArgument("unroll learning rates must be non-negative")
        if not self.fd_epsilon_scale > 0:
            raise BadArgument("fd_epsilon_scale must be positive")


def fd_coefficient(v: ParamVector, scale: float = 0.01) -> float:
    n = v.norm()
    if n <= ZERO_NORM:
        raise ZeroDirection(f"direction norm {n:.3g} is zero")
    return scale / n


def _fd_cross(grad_at, center: ParamVector, v: ParamVector, scale: float, tag: str):
    """Central-difference estimate ``(g(c + a v) - g(c - a v)) / 2a``; None when v vanishes."""
    try:
        alpha = fd_coefficient(v, scale)
    except ZeroDirection:
        log.debug("%s: zero direction, finite-difference term dropped", tag)
        return None
    PROBES[tag] += 2
    gp = grad_at(center.axpy(alpha, v))
    gm = grad_at(center.axpy(-alpha, v))
    return (gp - gm) * (1.0 / (2 * alpha))


# ---------------------------------------------------------------- learner side


def learner_unroll(net, A: ParamVector, W: ParamVector, batch_tr, xi_ln: float) -> ParamVector:
    """``W' = W - xi_ln * grad_W L_train(A, W)`` (plain step, no momentum or decay)."""
    _, g = ad.value_and_grad(train_loss_fn(net), {"A": A, "W": W}, batch_tr, ("W",))
    return W.axpy(-xi_ln, g["W"])


def arch_hypergradient(net, A, W, weights, bank, batch_tr, cfg: UnrollConfig, info: dict | None = None) -> ParamVector:
    """Gradient in A of the normalized test loss at the one-step unrolled weights.

    ``grad_A L(A, W') - xi_ln * (grad_A L_tr(A, W+) - grad_A L_tr(A, W-)) / 2 alpha``
    with ``W+- = W +- alpha * grad_W' L(A, W')``.
    """
    W1 = learner_unroll(net, A, W, batch_tr, cfg.xi_ln) if cfg.xi_ln else W
    loss, g = ad.value_and_grad(test_loss_fn(net, weights), {"A": A, "W": W1}, bank, ("A", "W"))
    if info is not None:
        info["loss"] = loss
        info["W_unrolled"] = W1
    grad = g["A"]
    if cfg.first_order or cfg.xi_ln == 0:
        return grad
    train = train_loss_fn(net)

    def grad_A(Wp):
        return ad.value_and_grad(train, {"A": A, "W": Wp}, batch_tr, ("A",))[1]["A"]

    hvp = _fd_cross(grad_A, W, g["W"], cfg.fd_epsilon_scale, "arch")
    if hvp is None:
        return grad
    return grad.axpy(-cfg.xi_ln, hvp)


# ---------------------------------------------------------------- tester side


def tester_unroll(tnet, E, X, C, tt_batch, bank, gamma, cfg: UnrollConfig, test_only=False):
    """One plain gradient step of E and X on the tester training loss."""
    blocks = {"E": E, "X": X, "C": C}
    _, g = ad.value_and_grad(stage2_fn(tnet, gamma, test_only), blocks, (tt_batch, bank), ("E", "X"))
    return E.axpy(-cfg.xi_E, g["E"]), X.axpy(-cfg.xi_X, g["X"])


def _bank_grad_C(tnet, E, X, C, bank) -> ParamVector:
    return ad.value_and_grad(bank_term_fn(tnet), {"E": E, "X": X, "C": C}, bank, ("C",))[1]["C"]


def _dE_dC_times(tnet, E, X, C, bank, u: ParamVector, gamma, cfg, tag):
    """``(dE'/dC)^T u`` via finite differences in E; None when it vanishes."""
    if gamma == 0 or cfg.xi_E == 0 or cfg.first_order:
        return None
    cross = _fd_cross(lambda Ep: _bank_grad_C(tnet, Ep, X, C, bank), E, u, cfg.fd_epsilon_scale, tag)
    return None if cross is None else cross * (-gamma * cfg.xi_E)


def _dX_dC_times(tnet, E, X, C, bank, u: ParamVector, gamma, cfg, tag):
    if gamma == 0 or cfg.xi_X == 0 or cfg.first_order:
        return None
    cross = _fd_cross(lambda Xp: _bank_grad_C(tnet, E, Xp, C, bank), X, u, cfg.fd_epsilon_scale, tag)
    return None if cross is None else cross * (-gamma * cfg.xi_X)


def _sum(parts, like: ParamVector) -> ParamVector:
    out = ParamVector.zeros(len(like), like.dtype)
    for p in parts:
        if p is not None:
            out = out + p
    return out


def creator_grad_val(tnet, E, X, C, E1, X1, bank, val_batch, gamma, cfg: UnrollConfig, info=None) -> ParamVector:
    """Gradient in C of the tester validation loss at the unrolled (E', X')."""
    loss, g = ad.value_and_grad(val_fn(tnet), {"E": E1, "X": X1}, val_batch, ("E", "X"))
    if info is not None:
        info["val_loss"] = loss
    via_E = _dE_dC_times(tnet, E, X, C, bank, g["E"], gamma, cfg, "creator_val_E")
    via_X = _dX_dC_times(tnet, E, X, C, bank, g["X"], gamma, cfg, "creator_val_X")
    return _sum((via_E, via_X), C)


def _selection_fns(tnet, losses):
    """Numerator ``sum f*loss`` and denominator ``sum f`` as functions of (C, E)."""

    def f_of(p, bank):
        return ad.sigmoid(tnet.creator_logit(p["C"], tnet.encode(p["E"], bank.inputs), bank.labels))

    num = DifferentiableFn(("C", "E"), lambda p, bank: ad.vsum(ad.mul(f_of(p, bank), losses.astype(p["C"].dtype))))
    den = DifferentiableFn(("C", "E"), lambda p, bank: ad.vsum(f_of(p, bank)))
    return num, den


def creator_grad_difficulty(net, A, W1, tnet, E, X, C, E1, bank, gamma, cfg: UnrollConfig, info=None) -> ParamVector:
    """Gradient in C of ``sum f(C, E'(C)) loss / sum f(C, E'(C))`` by the quotient rule.

    ``loss`` is the learner's per-example loss at (A, W'), constant in C. Both
    numerator and denominator take the direct path (E' held fixed) plus the
    path through E'(C).
    """
    losses = np.asarray(per_example_loss(net, A, W1, bank).value)
    num_fn, den_fn = _selection_fns(tnet, losses)
    blocks = {"C": C, "E": E1}
    num, gn = ad.value_and_grad(num_fn, blocks, bank, ("C", "E"))
    den, gd = ad.value_and_grad(den_fn, blocks, bank, ("C", "E"))
    if not den > EPS_CARD:
        raise DegenerateTest(f"soft test size {den:.3g} <= {EPS_CARD}")
    if info is not None:
        info["norm_test_loss"] = num / den
        info["card_sigma"] = den
    d_num = _sum((gn["C"], _dE_dC_times(tnet, E, X, C, bank, gn["E"], gamma, cfg, "creator_num")), C)
    d_den = _sum((gd["C"], _dE_dC_times(tnet, E, X, C, bank, gd["E"], gamma, cfg, "creator_den")), C)
    return (d_num * den - d_den * num) * (1.0 / (den * den))


def creator_total_grad(difficulty: ParamVector | None, val: ParamVector, lam: float) -> ParamVector:
    """Ascent direction of ``difficulty - lam * val``; a skipped difficulty term counts as zero."""
    out = val * (-lam)
    return out if difficulty is None else difficulty + out


def ablation1_difficulty_grad(s: ParamVector, positions, losses) -> tuple:
    """Normalized difficulty ``sum sig(s) loss / sum sig(s)`` and its gradient in all of ``s``."""
    positions = np.asarray(positions, dtype=np.int64)
    losses = np.asarray(losses)

    def rule(p, _):
        f = ad.sigmoid(p["s"][positions])
        card = ad.vsum(f)
        if not float(card.value) > EPS_CARD:
            raise DegenerateTest(f"soft test size {float(card.value):.3g} <= {EPS_CARD}")
        return ad.div(ad.vsum(ad.mul(f, losses.astype(f.dtype))), card)

    value, g = ad.value_and_grad(DifferentiableFn(("s",), rule), {"s": s}, None, ("s",))
    return value, g["s"]
