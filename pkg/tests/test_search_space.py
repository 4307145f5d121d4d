import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lpt import autodiff as ad
from lpt.errors import BadArgument
from lpt.oracle import numerical_grad, rel_err
from lpt.search_space import (
    CellSpec,
    FixedNetwork,
    Genotype,
    SuperNet,
    all_genotypes,
    discretize,
    mixed_op_forward,
    network_forward,
)


def test_mixed_op_equal_weights_is_mean():
    out = mixed_op_forward(np.zeros(2), ad.const(np.array([[2.0]])), ("identity", "zero"))
    assert np.allclose(out.value, 1.0)


def test_mixed_op_saturated_picks_first():
    out = mixed_op_forward(np.array([20.0, -20.0]), ad.const(np.array([[2.0]])), ("identity", "zero"))
    assert abs(out.value[0, 0] - 2.0) < 1e-8 * 2 + 1e-15


def test_mixed_op_gradient_in_a(rng):
    x = rng.normal(size=(3, 2))
    params = {"e/linear/M": ad.const(rng.normal(size=(2, 2))), "e/linear/b": ad.const(np.zeros(2))}
    ops = ("zero", "identity", "linear")

    def value(a):
        return float(ad.vsum(mixed_op_forward(a, ad.const(x), ops, params, "e")).value)

    a0 = rng.normal(size=3)
    leaf = ad.leaf(a0)
    (g,) = ad.backward(ad.vsum(mixed_op_forward(leaf, ad.const(x), ops, params, "e")), [leaf])
    assert rel_err(g, numerical_grad(value, a0)) < 1e-5


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-4, 4)), st.floats(-5, 5))
def test_shift_invariance(a, c):
    x = ad.const(np.array([[1.5, -0.5]]))
    ops = ("zero", "identity", "tanh_mlp")
    params = {"e/tanh_mlp/M": ad.const(np.eye(2)), "e/tanh_mlp/b": ad.const(np.zeros(2))}
    y1 = mixed_op_forward(a, x, ops, params, "e").value
    y2 = mixed_op_forward(a + c, x, ops, params, "e").value
    assert np.allclose(y1, y2, atol=1e-12)
    spec = CellSpec(num_nodes=3, ops=ops, width=2)
    assert discretize(spec, a) == discretize(spec, a + c)


def test_mixed_op_in_convex_hull(rng):
    x = ad.const(rng.normal(size=(4, 2)))
    ops = ("zero", "identity")
    y = mixed_op_forward(rng.normal(size=2), x, ops).value
    lo, hi = np.minimum(0, x.value), np.maximum(0, x.value)
    assert np.all(y >= lo - 1e-12) and np.all(y <= hi + 1e-12)


def test_all_zero_cell_gives_head_bias(rng):
    spec = CellSpec(num_nodes=3, ops=("zero", "identity"), width=3)
    net = SuperNet(spec, 2, 2)
    W = net.init_weights(rng)
    p = net.layout.unpack(ad.const(W))
    logits = network_forward(net, np.array([30.0, -30.0]), W, rng.normal(size=(5, 2))).value
    assert np.allclose(logits, p["head/b"].value, atol=1e-10)


def test_op_order_relabeling(rng):
    ops = ("zero", "identity", "linear")
    perm = (2, 0, 1)
    spec_a = CellSpec(num_nodes=3, ops=ops, width=2)
    spec_b = CellSpec(num_nodes=3, ops=tuple(ops[i] for i in perm), width=2)
    na, nb = SuperNet(spec_a, 2, 2), SuperNet(spec_b, 2, 2)
    W = na.init_weights(rng)
    named = na.layout.unpack(ad.const(W))
    Wb = nb.layout.pack({k: v.value for k, v in named.items()})
    A = rng.normal(size=3)
    x = rng.normal(size=(4, 2))
    assert np.allclose(network_forward(na, A, W, x).value, network_forward(nb, A[list(perm)], Wb, x).value)


def test_linear_cell_closed_form(rng):
    # one intermediate node, single linear edge, saturated toward linear
    spec = CellSpec(num_nodes=3, ops=("zero", "identity", "linear"), width=2)
    net = SuperNet(spec, 2, 2)
    W = net.init_weights(rng)
    p = {k: v.value for k, v in net.layout.unpack(ad.const(W)).items()}
    x = rng.normal(size=(3, 2))
    h = np.tanh(x @ p["stem/M"] + p["stem/b"])
    cell = h @ p["cell0/edge0/linear/M"] + p["cell0/edge0/linear/b"]
    expect = cell @ p["head/M"] + p["head/b"]
    got = network_forward(net, np.array([-50.0, -50.0, 50.0]), W, x).value
    assert np.allclose(got, expect, atol=1e-12)


def test_discretize_prefers_non_zero_and_breaks_ties_low():
    spec = CellSpec(num_nodes=3, ops=("zero", "identity", "linear"), width=2)
    assert discretize(spec, np.array([5.0, 0.1, 0.9])) == Genotype(((1, ((0, "linear"),)),))
    assert discretize(spec, np.zeros(3)) == Genotype(((1, ((0, "identity"),)),))
    spec4 = CellSpec(num_nodes=5, ops=("zero", "identity", "linear"), width=2, k_in=1)
    g = discretize(spec4, np.zeros(spec4.arch_size))
    assert g.nodes[2] == (3, ((0, "identity"),))


def _brute_discretize(spec, A):
    a = A.reshape(spec.num_edges, len(spec.ops))
    best = {}
    for e, (src, dst) in enumerate(spec.edges):
        w = np.exp(a[e]) / np.exp(a[e]).sum()
        cand = [(w[k], -k, spec.ops[k]) for k in range(len(spec.ops)) if spec.ops[k] != "zero"]
        s, _, op = max(cand)
        best.setdefault(dst, []).append((s, -e, src, op))
    nodes = []
    for dst in sorted(best):
        keep = sorted(best[dst], reverse=True)[: min(spec.k_in, dst)]
        nodes.append((dst, tuple(sorted((src, op) for _, _, src, op in keep))))
    return Genotype(tuple(nodes))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_discretize_matches_brute_force(seed):
    spec = CellSpec(num_nodes=6, ops=("zero", "identity", "linear", "tanh_mlp"), width=2)
    A = np.random.default_rng(seed).normal(size=spec.arch_size)
    assert discretize(spec, A) == _brute_discretize(spec, A)


def test_genotype_counts_and_uniqueness():
    small = CellSpec(num_nodes=4, ops=("zero", "identity", "linear"), width=2)
    gs = all_genotypes(small)
    assert len(gs) == 8 and len(set(gs)) == 8
    assert len(all_genotypes(CellSpec(num_nodes=4, width=2))) == 27


def test_genotype_json_roundtrip_and_check():
    spec = CellSpec(num_nodes=4, width=2)
    for g in all_genotypes(spec)[:5]:
        back = Genotype.from_json(g.to_json())
        assert back == g
        back.check(spec)
    with pytest.raises(BadArgument):
        Genotype(((1, ((0, "zero"),)),))
    with pytest.raises(BadArgument):
        Genotype(((1, ((0, "linear"),)),)).check(spec)


def test_unsupported_ops_are_rejected():
    with pytest.raises(BadArgument):
        CellSpec(ops=("zero", "identity", "sep_conv_3x3"))
    with pytest.raises(BadArgument):
        CellSpec(ops=("identity", "linear"))


def test_fixed_network_equals_saturated_supernet(rng):
    spec = CellSpec(num_nodes=3, ops=("zero", "identity", "linear"), width=2)
    net = SuperNet(spec, 2, 2)
    g = Genotype(((1, ((0, "linear"),)),))
    fixed = FixedNetwork(g, spec, 2, 2)
    W = net.init_weights(rng)
    named = {k: v.value for k, v in net.layout.unpack(ad.const(W)).items()}
    Wf = fixed.layout.pack({k.replace("edge0", "n1s0"): v for k, v in named.items() if k in {
        "stem/M", "stem/b", "head/M", "head/b", "cell0/edge0/linear/M", "cell0/edge0/linear/b"}})
    x = rng.normal(size=(4, 2))
    assert np.allclose(fixed.logits(Wf, x).value, network_forward(net, np.array([-60.0, -60, 60]), W, x).value)


def test_image_supernet_runs(rng):
    spec = CellSpec(num_nodes=4, num_cells=2, ops=("zero", "identity", "conv_3x3", "avg_pool_3x3"), width=3)
    net = SuperNet(spec, 16, 3, image_shape=(1, 4, 4))
    out = network_forward(net, net.init_arch(), net.init_weights(rng), rng.normal(size=(2, 16)))
    assert out.shape == (2, 3)


def test_forward_shape_errors(rng):
    net = SuperNet(CellSpec(num_nodes=3, width=2), 2, 2)
    with pytest.raises(BadArgument):
        net.forward(np.zeros(3), net.init_weights(rng), np.zeros((1, 2)))
    with pytest.raises(BadArgument):
        net.forward(net.init_arch(), net.init_weights(rng), np.zeros((1, 3)))
