import math

import numpy as np
import pytest

from lpt import autodiff as ad
from lpt.autodiff import ParamVector
from lpt.data import Dataset
from lpt.errors import BadArgument
from lpt.tester import (
    TesterNet as Net,
    ablation1_selection,
    ablation2_stage2,
    bank_term,
    executor_losses,
    selection_weight,
    selection_weights,
    stage2_loss,
    val_loss,
)


@pytest.fixture
def tiny(rng, moons):
    tnet = Net(2, 2, hidden=4, latent=3)
    E, C, X = tnet.init(rng)
    return tnet, E, C, X, moons.subset(range(16)), moons.subset(range(16, 24))


def _with_bias(tnet, value):
    p = {k: np.zeros(shape) for k, (_, shape, _) in tnet.cre.entries.items()}
    p["b"][:] = value
    return ParamVector(tnet.cre.pack(p))


def test_zero_creator_gives_half(tiny):
    tnet, E, C, X, tt, bank = tiny
    assert np.all(selection_weights(tnet, E, C, bank).value == 0.5)
    assert selection_weight(tnet, E, C, bank[0]) == 0.5


def test_saturated_creator(tiny):
    tnet, E, _, X, tt, bank = tiny
    f = selection_weights(tnet, E, _with_bias(tnet, 20.0), bank).value
    assert np.all(np.abs(1 - f) < 1e-8)


def test_gamma_zero_is_plain_tester_loss(tiny):
    tnet, E, C, X, tt, bank = tiny
    plain = float(ad.mean(executor_losses(tnet, E, X, tt)).value)
    assert float(stage2_loss(tnet, E, X, C, tt, bank, 0.0).value) == plain


def test_bank_term_saturated_is_unweighted_sum(tiny):
    tnet, E, _, X, tt, bank = tiny
    full = float(ad.vsum(executor_losses(tnet, E, X, bank)).value)
    assert math.isclose(float(bank_term(tnet, E, X, _with_bias(tnet, 40.0), bank).value), full, rel_tol=1e-12)


def test_bank_term_arithmetic():
    # latent 1, identity-like encoder is not needed: weights and losses come from logits directly
    f, losses = np.array([0.5, 0.25]), np.array([2.0, 4.0])
    assert float(ad.vsum(ad.mul(f, losses)).value) == 2.0


def test_ablation2_is_stage2_minus_first_term(tiny):
    tnet, E, C, X, tt, bank = tiny
    C = ParamVector(np.random.default_rng(1).normal(size=len(C)))
    total = float(stage2_loss(tnet, E, X, C, tt, bank, 1.0).value)
    first = float(ad.mean(executor_losses(tnet, E, X, tt)).value)
    assert math.isclose(float(ablation2_stage2(tnet, E, X, C, bank, 1.0).value), total - first, rel_tol=1e-12)
    half = 0.5 * float(ad.vsum(executor_losses(tnet, E, X, bank)).value)
    assert math.isclose(float(ablation2_stage2(tnet, E, X, ParamVector(np.zeros(len(C))), bank, 1.0).value), half)


def test_uniform_executor_gives_ln2(tiny):
    tnet, E, C, X, tt, bank = tiny
    zero_x = ParamVector(np.zeros(len(X)))
    assert math.isclose(float(val_loss(tnet, E, zero_x, bank).value), math.log(2))
    assert float(val_loss(tnet, E, X, bank).value) == float(val_loss(tnet, E, X, bank).value)
    with pytest.raises(BadArgument):
        val_loss(tnet, E, X, bank.subset([]))


def test_hand_set_encoder_and_executor():
    tnet = Net(1, 2, hidden=1, latent=1)
    E = ParamVector(tnet.enc.pack({"M1": np.array([[1.0]]), "b1": np.zeros(1), "M2": np.array([[2.0]]), "b2": np.zeros(1)}))
    X = ParamVector(tnet.exe.pack({"M": np.array([[1.0, -1.0]]), "b": np.zeros(2)}))
    batch = Dataset([0], [[0.5]], [1], 2)
    h = math.tanh(2 * math.tanh(0.5))
    expect = math.log(1 + math.exp(2 * h))
    assert math.isclose(float(val_loss(tnet, E, X, batch).value), expect, rel_tol=1e-12)


def test_ablation1_selection():
    assert np.all(ablation1_selection(ParamVector(np.zeros(3))).value == 0.5)


def test_encoder_sharing(tiny, rng):
    tnet, E, C, X, tt, bank = tiny
    C = ParamVector(rng.normal(size=len(C)))

    def both(E_, C_, X_):
        h = tnet.encode(E_, bank.inputs)
        return tnet.creator_logit(C_, h, bank.labels).value, tnet.executor_logits(X_, h).value

    f0, z0 = both(E, C, X)
    bump = lambda v: ParamVector(v.values + 0.1)  # noqa: E731
    f1, z1 = both(bump(E), C, X)
    assert not np.allclose(f0, f1) and not np.allclose(z0, z1)
    f2, z2 = both(E, C, bump(X))
    assert np.array_equal(f0, f2) and not np.allclose(z0, z2)
    f3, z3 = both(E, bump(C), X)
    assert not np.allclose(f0, f3) and np.array_equal(z0, z3)


def test_gamma_zero_has_no_creator_gradient(tiny):
    from lpt.tester import stage2_fn

    tnet, E, C, X, tt, bank = tiny
    _, g = ad.value_and_grad(stage2_fn(tnet, 0.0), {"E": E, "X": X, "C": C}, (tt, bank), ("C",))
    assert np.all(g["C"].values == 0)


def test_weights_always_in_open_interval(tiny, rng):
    tnet, E, _, X, tt, bank = tiny
    for _ in range(20):
        f = selection_weights(tnet, E, ParamVector(rng.normal(scale=3, size=tnet.cre.size)), bank).value
        assert np.all((f > 0) & (f < 1)) and 0 < f.sum() < len(bank)


def test_image_tester_runs(rng):
    tnet = Net(16, 3, hidden=2, latent=2, image_shape=(1, 4, 4))
    E, C, X = tnet.init(rng)
    data = Dataset(range(3), rng.normal(size=(3, 16)), [0, 1, 2], 3, image_shape=(1, 4, 4))
    assert selection_weights(tnet, E, C, data).shape == (3,)
