import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lpt import autodiff as ad
from lpt.autodiff import DifferentiableFn, ParamVector
from lpt.errors import BadArgument, NonFiniteLoss, NotDifferentiableTwice
from lpt.oracle import numerical_grad, rel_err

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def half_norm():
    return DifferentiableFn(("t",), lambda p, _: ad.mul(ad.vsum(ad.mul(p["t"], p["t"])), 0.5))


def test_half_norm_gradient():
    loss, g = ad.value_and_grad(half_norm(), {"t": ParamVector([3.0, 4.0])}, None, ("t",))
    assert loss == 12.5
    assert np.array_equal(g["t"].values, [3.0, 4.0])


def test_hvp_of_diagonal_quadratic():
    f = DifferentiableFn(("t",), lambda p, _: ad.vsum(ad.mul(ad.mul(p["t"], p["t"]), np.array([1.0, 2.0]))))
    out = ad.hvp_exact(f, {"t": ParamVector([0.3, -1.0])}, "t", ParamVector([1.0, 1.0]), None)
    assert np.allclose(out.values, [2.0, 4.0])


def test_hvp_matches_finite_difference_of_gradient(rng):
    x = rng.normal(size=(5, 3))
    M = rng.normal(size=(3, 2))

    def rule(p, _):
        h = ad.tanh(ad.matmul(ad.const(x), ad.reshape(p["t"], (3, 2))))
        return ad.mean(ad.cross_entropy(h, np.array([0, 1, 1, 0, 1])))

    f = DifferentiableFn(("t",), rule)
    t = ParamVector(M.reshape(-1))
    v = ParamVector(rng.normal(size=6))
    hv = ad.hvp_exact(f, {"t": t}, "t", v, None)

    def grad_at(a):
        return ad.value_and_grad(f, {"t": ParamVector(a)}, None, ("t",))[1]["t"].values

    eps = 1e-6
    ref = (grad_at(t.values + eps * v.values) - grad_at(t.values - eps * v.values)) / (2 * eps)
    assert rel_err(hv, ref) < 1e-6


def test_unknown_and_missing_blocks():
    f = half_norm()
    with pytest.raises(BadArgument):
        ad.value_and_grad(f, {"t": ParamVector([1.0])}, None, ("u",))
    with pytest.raises(BadArgument):
        ad.value_and_grad(f, {}, None, ("t",))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_fails_fast():
    f = DifferentiableFn(("t",), lambda p, _: ad.vsum(ad.log(p["t"])))
    with pytest.raises(NonFiniteLoss):
        ad.value_and_grad(f, {"t": ParamVector([-1.0])}, None, ("t",))


def test_second_order_through_first_order_only_primitive():
    x = ad.leaf(np.ones((1, 1, 3, 3)))
    y = ad.vsum(ad.avgpool3x3(x))
    (g,) = ad.backward(y, [x], create_graph=False)
    assert g.shape == (1, 1, 3, 3)
    with pytest.raises(NotDifferentiableTwice):
        ad.backward(y, [x], create_graph=True)


def test_unreachable_input_gets_zero_gradient():
    a, b = ad.leaf(np.array([1.0, 2.0])), ad.leaf(np.array([5.0]))
    ga, gb = ad.backward(ad.vsum(a), [a, b])
    assert np.array_equal(np.asarray(gb), [0.0])


def test_paramvector_is_immutable():
    v = ParamVector([1.0, 2.0])
    with pytest.raises(ValueError):
        v.values[0] = 3.0
    with pytest.raises(NonFiniteLoss):
        ParamVector([np.nan])


def test_float32_stays_float32():
    f = half_norm()
    _, g = ad.value_and_grad(f, {"t": ParamVector(np.ones(3, dtype=np.float32))}, None, ("t",))
    assert g["t"].dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite), st.lists(st.integers(0, 2), min_size=4, max_size=4))
def test_cross_entropy_gradient_property(logits, labels):
    f = DifferentiableFn(("z",), lambda p, _: ad.mean(ad.cross_entropy(ad.reshape(p["z"], (4, 3)), labels)))
    z = ParamVector(logits.reshape(-1))
    _, g = ad.value_and_grad(f, {"z": z}, None, ("z",))
    ref = numerical_grad(lambda t: f.evaluate({"z": ParamVector(t)}, None), z)
    assert np.max(np.abs(g["z"].values - ref)) < 1e-7


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 6, elements=finite))
def test_composite_elementwise_gradient_property(t):
    def rule(p, _):
        x = p["t"]
        return ad.vsum(ad.add(ad.mul(ad.sigmoid(x), ad.tanh(x)), ad.div(ad.exp(ad.mul(x, 0.3)), 2.0)))

    f = DifferentiableFn(("t",), rule)
    _, g = ad.value_and_grad(f, {"t": ParamVector(t)}, None, ("t",))
    ref = numerical_grad(lambda a: f.evaluate({"t": ParamVector(a)}, None), t)
    assert np.max(np.abs(g["t"].values - ref)) < 1e-7


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite))
def test_softmax_hvp_is_symmetric(t, v):
    f = DifferentiableFn(("t",), lambda p, _: ad.vsum(ad.mul(ad.softmax(p["t"]), np.arange(5.0))))
    blocks = {"t": ParamVector(t)}
    e = np.eye(5)
    H = np.stack([ad.hvp_exact(f, blocks, "t", ParamVector(e[i]), None).values for i in range(5)])
    assert np.allclose(H, H.T, atol=1e-10)
