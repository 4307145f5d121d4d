import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lpt import autodiff as ad
from lpt import learner
from lpt.autodiff import DifferentiableFn, ParamVector
from lpt.data import Dataset
from lpt.errors import BadArgument, DegenerateTest
from lpt.optim import SGD
from lpt.search_space import CellSpec, SuperNet

unit = st.floats(0.01, 1.0)
pos = st.floats(0.0, 10.0)


def _zero_net():
    spec = CellSpec(num_nodes=3, ops=("zero", "identity"), width=2)
    return SuperNet(spec, 2, 2)


def test_uniform_logits_give_ln2():
    net = _zero_net()
    W = np.zeros(net.weight_size)
    batch = Dataset([0, 1, 2], np.ones((3, 2)), [0, 1, 1], 2)
    assert math.isclose(float(learner.train_loss(net, net.init_arch(), W, batch).value), math.log(2))


def test_saturated_logits_give_zero_loss():
    net = _zero_net()
    p = {k: np.zeros(shape) for k, (_, shape, _) in net.layout.entries.items()}
    p["head/b"] = np.array([40.0, -40.0])
    W = net.layout.pack(p)
    batch = Dataset([0], np.ones((1, 2)), [0], 2)
    assert float(learner.train_loss(net, net.init_arch(), W, batch).value) < 1e-15


def test_hand_computed_cross_entropy():
    net = _zero_net()
    p = {k: np.zeros(shape) for k, (_, shape, _) in net.layout.entries.items()}
    p["head/b"] = np.array([1.0, 0.0])
    W = net.layout.pack(p)
    batch = Dataset([0, 1, 2], np.zeros((3, 2)), [0, 1, 1], 2)
    l0, l1 = math.log(1 + math.exp(-1)), math.log(1 + math.exp(1))
    assert math.isclose(float(learner.train_loss(net, np.zeros(2), W, batch).value), (l0 + 2 * l1) / 3)


def test_weighted_and_normalized_arithmetic():
    assert float(learner.weighted_sum(np.array([1.0, 0.5]), np.array([2.0, 4.0])).value) == 4.0
    assert float(learner.weighted_sum(np.zeros(2), np.array([2.0, 4.0])).value) == 0.0
    assert float(learner.normalized(np.array([0.5, 0.5]), np.array([2.0, 4.0])).value) == 3.0
    with pytest.raises(DegenerateTest):
        learner.normalized(np.zeros(2), np.array([2.0, 4.0]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=unit), arrays(np.float64, 6, elements=pos), st.floats(0.01, 1.0))
def test_normalized_scale_invariance_and_brute_force(f, losses, c):
    a = float(learner.normalized(f, losses).value)
    assert math.isclose(a, float(learner.normalized(c * f, losses).value), rel_tol=1e-12, abs_tol=1e-12)
    assert math.isclose(a, sum(fi * li for fi, li in zip(f, losses)) / sum(f), rel_tol=1e-12, abs_tol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=unit), arrays(np.float64, 5, elements=pos), st.integers(0, 4))
def test_weighted_loss_monotone_in_each_weight(f, losses, i):
    g = f.copy()
    g[i] = min(1.0, g[i] + 0.1)
    assert float(learner.weighted_sum(g, losses).value) >= float(learner.weighted_sum(f, losses).value)


def test_equal_weights_give_plain_mean(moons, rng):
    net = SuperNet(CellSpec(num_nodes=3, width=2), 2, 2)
    A, W = net.init_arch(), net.init_weights(rng)
    plain = float(ad.mean(learner.per_example_loss(net, A, W, moons)).value)
    for c in (0.3, 1.0):
        assert math.isclose(learner.normalized_test_loss(net, A, W, np.full(64, c), moons), plain, rel_tol=1e-12)
    with pytest.raises(BadArgument):
        learner.weighted_test_loss(net, A, W, np.full(64, 1.5), moons)


def test_sgd_step_on_quadratic():
    opt = SGD(lr=0.1, momentum=0.0, weight_decay=0.0)
    w = ParamVector([1.0])
    assert np.allclose(opt.step(w, w).values, [0.9])
    still = SGD(lr=0.1, momentum=0.0, weight_decay=0.0).step(w, ParamVector([0.0]))
    assert still == w


def test_sgd_converges_on_convex_quadratic():
    H, target = np.diag([1.0, 3.0]), np.array([0.5, -2.0])
    opt = SGD(lr=0.2, momentum=0.5, weight_decay=0.0)
    w = ParamVector(np.zeros(2))
    for _ in range(100):
        w = opt.step(w, ParamVector(H @ (w.values - target)))
    assert np.max(np.abs(w.values - target)) < 1e-3


def test_weights_step_touches_only_w_and_reads_only_its_batch(moons, rng):
    net = SuperNet(CellSpec(num_nodes=3, width=2), 2, 2)
    state = learner.LearnerState.create(net, rng)
    A0, W0 = state.A, state.W
    learner.weights_step(state, moons.subset(range(8)), lr=0.05)
    assert state.A == A0 and state.W != W0 and np.isfinite(state.last_train_loss)


def test_arch_loss_is_normalized_weighted_loss(moons, rng):
    net = SuperNet(CellSpec(num_nodes=3, width=2), 2, 2)
    A, W = ParamVector(rng.normal(size=net.spec.arch_size)), ParamVector(net.init_weights(rng))
    f = rng.uniform(0.1, 1.0, 64)
    fn = learner.test_loss_fn(net, f)
    assert math.isclose(fn.evaluate({"A": A, "W": W}, moons), learner.normalized_test_loss(net, A, W, f, moons))
    assert isinstance(fn, DifferentiableFn)
