"""Reverse-mode automatic differentiation on numpy arrays.

Computations are written with :class:`Var` objects. Every primitive stores a
numpy backward rule (used for ordinary gradients) and, where available, a
backward rule written with ``Var`` operations (used when a gradient must
itself be differentiated, e.g. for exact Hessian-vector products).

Parameters travel between modules as :class:`ParamVector`, a flat, finite,
fixed-length float vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from lpt import kernels
from lpt.errors import BadArgument, NonFiniteLoss, NotDifferentiableTwice

DTYPES = {"float64": np.float64, "float32": np.float32}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise BadArgument(f"unknown precision {precision!r}") from None
    return np.dtype(precision)


class ParamVector:
    """Immutable flat parameter vector. Arithmetic returns new vectors."""

    __slots__ = ("_values",)

    def __init__(self, values, dtype=None):
        arr = np.array(values, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        arr = arr.reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteLoss("ParamVector entries must be finite")
        arr.setflags(write=False)
        self._values = arr

    @classmethod
    def zeros(cls, n, dtype=np.float64):
        return cls(np.zeros(n, dtype=dtype))

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def dtype(self):
        return self._values.dtype

    def __len__(self):
        return self._values.shape[0]

    @property
    def length(self) -> int:
        return len(self)

    def _other(self, other):
        if isinstance(other, ParamVector):
            if len(other) != len(self):
                raise BadArgument(f"length mismatch: {len(self)} vs {len(other)}")
            return other._values
        raise TypeError(f"expected ParamVector, got {type(other).__name__}")

    def __add__(self, other):
        return ParamVector(self._values + self._other(other))

    def __sub__(self, other):
        return ParamVector(self._values - self._other(other))

    def __mul__(self, scalar):
        return ParamVector(self._values * self._values.dtype.type(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return ParamVector(-self._values)

    def scale(self, scalar) -> "ParamVector":
        return self * scalar

    def axpy(self, alpha, other) -> "ParamVector":
        """Return ``self + alpha * other``."""
        return ParamVector(self._values + self._values.dtype.type(alpha) * self._other(other))

    def dot(self, other) -> float:
        return float(np.dot(self._values, self._other(other)))

    def norm(self) -> float:
        return float(np.linalg.norm(self._values))

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self._values.astype(dtype))

    def copy_array(self) -> np.ndarray:
        return self._values.copy()

    def __eq__(self, other):
        return isinstance(other, ParamVector) and np.array_equal(self._values, other._values)

    def __hash__(self):
        return hash(self._values.tobytes())

    def __repr__(self):
        return f"ParamVector(n={len(self)}, dtype={self.dtype.name})"


# ---------------------------------------------------------------- graph nodes


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "parents", "backward_fn", "graph_fn", "requires_grad")
    __array_priority__ = 100

    def __init__(self, value, parents=(), backward_fn=None, graph_fn=None, requires_grad=False):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.graph_fn = graph_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def leaf(value, dtype=None) -> Var:
    """A differentiable input."""
    return Var(np.array(value, dtype=dtype), requires_grad=True)


def const(value, dtype=None) -> Var:
    if isinstance(value, Var):
        return value
    return Var(np.asarray(value, dtype=dtype))


def _as_var(x, like=None) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, ParamVector):
        return Var(x.values)
    dtype = like.dtype if like is not None and not isinstance(x, np.ndarray) else None
    return Var(np.asarray(x, dtype=dtype))


def _node(value, parents, backward_fn, graph_fn=None) -> Var:
    if not any(p.requires_grad for p in parents):
        return Var(value)
    return Var(value, tuple(parents), backward_fn, graph_fn, True)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = _sum_axis(g, 0, keepdims=False)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = _sum_axis(g, ax, keepdims=True)
    return g


def _sum_axis(x: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    """Sequential sum along one axis (or all axes) via the kernel."""
    if axis is None:
        out = kernels.sum_rows(x.reshape(-1, 1))[0]
        return out.reshape((1,) * x.ndim) if keepdims else out.reshape(())
    axis = axis % x.ndim
    moved = np.moveaxis(x, axis, 0)
    rest = moved.shape[1:]
    out = kernels.sum_rows(moved.reshape(moved.shape[0], -1)).reshape(rest)
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


def _unbroadcast_var(g: Var, shape) -> Var:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = vsum(g, 0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = vsum(g, ax, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Var:
    a, b = _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)
    sa, sb = a.shape, b.shape
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        lambda g, out: (_unbroadcast_var(g, sa), _unbroadcast_var(g, sb)),
    )


def sub(a, b) -> Var:
    a, b = _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)
    sa, sb = a.shape, b.shape
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        lambda g, out: (_unbroadcast_var(g, sa), _unbroadcast_var(neg(g), sb)),
    )


def mul(a, b) -> Var:
    a, b = _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)
    sa, sb = a.shape, b.shape
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, sa), _unbroadcast(g * a.value, sb)),
        lambda g, out: (_unbroadcast_var(mul(g, b), sa), _unbroadcast_var(mul(g, a), sb)),
    )


def div(a, b) -> Var:
    a, b = _as_var(a, b if isinstance(b, Var) else None), _as_var(b, a if isinstance(a, Var) else None)
    sa, sb = a.shape, b.shape
    value = a.value / b.value
    return _node(
        value,
        (a, b),
        lambda g: (_unbroadcast(g / b.value, sa), _unbroadcast(-g * value / b.value, sb)),
        lambda g, out: (
            _unbroadcast_var(div(g, b), sa),
            _unbroadcast_var(neg(div(mul(g, out), b)), sb),
        ),
    )


def neg(a) -> Var:
    a = _as_var(a)
    return _node(-a.value, (a,), lambda g: (-g,), lambda g, out: (neg(g),))


def matmul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    if a.ndim != 2 or b.ndim != 2:
        raise BadArgument(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return _node(
        kernels.matmul(a.value, b.value),
        (a, b),
        lambda g: (kernels.matmul(g, b.value.T), kernels.matmul(a.value.T, g)),
        lambda g, out: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a) -> Var:
    a = _as_var(a)
    return _node(a.value.T, (a,), lambda g: (g.T,), lambda g, out: (transpose(g),))


def reshape(a, shape) -> Var:
    a = _as_var(a)
    old = a.shape
    return _node(
        a.value.reshape(shape),
        (a,),
        lambda g: (g.reshape(old),),
        lambda g, out: (reshape(g, old),),
    )


def getitem(a, idx) -> Var:
    a = _as_var(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.value[idx], (a,), back, lambda g, out: (scatter(g, idx, shape),))


def scatter(g, idx, shape) -> Var:
    """Adjoint of ``getitem``: a zero array of ``shape`` with ``g`` added at ``idx``."""
    g = _as_var(g)
    full = np.zeros(shape, dtype=g.dtype)
    np.add.at(full, idx, g.value)
    return _node(full, (g,), lambda h: (h[idx],), lambda h, out: (getitem(h, idx),))


def vsum(a, axis=None, keepdims=False) -> Var:
    a = _as_var(a)
    shape = a.shape
    value = _sum_axis(a.value, axis, keepdims)

    def expand(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    def expand_var(g, out):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.value, axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)

    def back(g):
        if axis is None and not keepdims:
            return (np.broadcast_to(g, shape).copy(),)
        return (expand(g),)

    return _node(value, (a,), back, expand_var)


def broadcast_to(a, shape) -> Var:
    a = _as_var(a)
    old = a.shape
    return _node(
        np.broadcast_to(a.value, shape).copy(),
        (a,),
        lambda g: (_unbroadcast(g, old),),
        lambda g, out: (_unbroadcast_var(g, old),),
    )


def mean(a, axis=None) -> Var:
    a = _as_var(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(vsum(a, axis), a.dtype.type(1.0 / n))


def tanh(a) -> Var:
    a = _as_var(a)
    y = np.tanh(a.value)
    return _node(
        y,
        (a,),
        lambda g: (g * (1 - y * y),),
        lambda g, out: (mul(g, sub(1.0, mul(out, out))),),
    )


def sigmoid(a) -> Var:
    a = _as_var(a)
    x = a.value
    # branch-free stable logistic
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _node(
        y,
        (a,),
        lambda g: (g * y * (1 - y),),
        lambda g, out: (mul(g, mul(out, sub(1.0, out))),),
    )


def exp(a) -> Var:
    a = _as_var(a)
    y = np.exp(a.value)
    return _node(y, (a,), lambda g: (g * y,), lambda g, out: (mul(g, out),))


def log(a) -> Var:
    a = _as_var(a)
    return _node(np.log(a.value), (a,), lambda g: (g / a.value,), lambda g, out: (div(g, a),))


def softmax(a, axis=-1) -> Var:
    a = _as_var(a)
    z = a.value - np.max(a.value, axis=axis, keepdims=True)
    ez = np.exp(z)
    y = ez / _sum_axis(ez, axis, keepdims=True)

    def back(g):
        return (y * (g - _sum_axis(g * y, axis, keepdims=True)),)

    def graph(g, out):
        return (mul(out, sub(g, vsum(mul(g, out), axis, keepdims=True))),)

    return _node(y, (a,), back, graph)


def log_softmax(a, axis=-1) -> Var:
    a = _as_var(a)
    z = a.value - np.max(a.value, axis=axis, keepdims=True)
    lse = np.log(_sum_axis(np.exp(z), axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def back(g):
        return (g - sm * _sum_axis(g, axis, keepdims=True),)

    def graph(g, out):
        return (sub(g, mul(softmax(a, axis), vsum(g, axis, keepdims=True))),)

    return _node(y, (a,), back, graph)


def cross_entropy(logits, labels) -> Var:
    """Per-example cross-entropy ``-log softmax(logits)[i, labels[i]]``."""
    logits = _as_var(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise BadArgument(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    return neg(getitem(log_softmax(logits, axis=1), (np.arange(labels.shape[0]), labels)))


def conv3x3(x, w) -> Var:
    """Same-padded 3x3 convolution, NCHW input, OIHW weights. First-order only."""
    x, w = _as_var(x), _as_var(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2:] != (3, 3):
        raise BadArgument(f"conv3x3: input {x.shape} vs weight {w.shape}")
    return _node(
        kernels.conv3x3(x.value, w.value),
        (x, w),
        lambda g: (kernels.conv3x3_grad_input(g, w.value), kernels.conv3x3_grad_weight(x.value, g)),
    )


def avgpool3x3(x) -> Var:
    """Same-padded 3x3 average pool that excludes padding from the count. First-order only."""
    x = _as_var(x)
    return _node(kernels.avgpool3x3(x.value), (x,), lambda g: (kernels.avgpool3x3_grad(g),))


def dot(a, b) -> Var:
    return vsum(mul(a, b))


# ---------------------------------------------------------------- backprop


def _topo(out: Var):
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Var, inputs, create_graph=False):
    """Gradients of scalar ``out`` with respect to each Var in ``inputs``.

    With ``create_graph`` the returned gradients are themselves ``Var`` nodes
    that can be differentiated again; otherwise plain arrays. Inputs the
    output does not depend on receive zeros.
    """
    if out.value.size != 1:
        raise BadArgument(f"backward needs a scalar output, got shape {out.shape}")
    wanted = {id(v) for v in inputs}
    grads = {}
    if out.requires_grad:
        seed = np.ones_like(out.value)
        grads[id(out)] = Var(seed) if create_graph else seed
        for node in reversed(_topo(out)):
            if not node.parents:
                continue
            g = grads.get(id(node))
            if id(node) not in wanted:
                grads.pop(id(node), None)
            if g is None:
                continue
            if create_graph:
                if node.graph_fn is None:
                    raise NotDifferentiableTwice("operation has no second-order rule")
                pgs = node.graph_fn(g, node)
            else:
                pgs = node.backward_fn(g)
            for p, pg in zip(node.parents, pgs):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else (add(prev, pg) if create_graph else prev + pg)
    result = []
    for v in inputs:
        g = grads.get(id(v))
        if g is None:
            g = np.zeros_like(v.value)
            g = Var(g) if create_graph else g
        result.append(g)
    return result


# ---------------------------------------------------------------- functions of parameter blocks


@dataclass(frozen=True)
class DifferentiableFn:
    """A scalar loss of named parameter blocks and a batch.

    ``rule(params, batch)`` receives a dict of ``Var`` (one per block name)
    and must return a scalar ``Var``.
    """

    names: tuple
    rule: Callable

    def __call__(self, params: Mapping[str, Var], batch) -> Var:
        return self.rule(params, batch)

    def evaluate(self, blocks: Mapping[str, ParamVector], batch) -> float:
        params = {n: const(blocks[n].values) for n in self.names}
        out = self.rule(params, batch)
        val = float(out.value)
        if not np.isfinite(val):
            raise NonFiniteLoss(f"loss evaluated to {val}")
        return val


def linear_combination(terms) -> DifferentiableFn:
    """``sum(coef * fn)`` over ``(coef, fn)`` pairs; block names are unioned."""
    terms = tuple(terms)
    names = tuple(dict.fromkeys(n for _, fn in terms for n in fn.names))

    def rule(params, batch):
        total = None
        for coef, fn in terms:
            part = mul(fn({n: params[n] for n in fn.names}, batch), coef)
            total = part if total is None else add(total, part)
        return total

    return DifferentiableFn(names, rule)


def _check_blocks(f: DifferentiableFn, blocks, wrt):
    missing = [n for n in f.names if n not in blocks]
    if missing:
        raise BadArgument(f"missing parameter blocks: {missing}")
    unknown = [n for n in wrt if n not in f.names]
    if unknown:
        raise BadArgument(f"unknown block name(s): {unknown}")


def value_and_grad(f: DifferentiableFn, blocks: Mapping[str, ParamVector], batch, wrt):
    """Loss value and exact gradients for the blocks named in ``wrt``."""
    wrt = tuple(wrt)
    _check_blocks(f, blocks, wrt)
    params = {
        n: Var(blocks[n].values, requires_grad=True) if n in wrt else Var(blocks[n].values)
        for n in f.names
    }
    out = f(params, batch)
    loss = float(out.value)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss evaluated to {loss}")
    raw = backward(out, [params[n] for n in wrt])
    grads = {}
    for n, g in zip(wrt, raw):
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss(f"non-finite gradient for block {n!r}")
        grads[n] = ParamVector(g.astype(blocks[n].dtype, copy=False))
    return loss, grads


def hvp_exact(f: DifferentiableFn, blocks: Mapping[str, ParamVector], name: str, v: ParamVector, batch):
    """Exact Hessian-vector product of ``f`` in block ``name`` (reverse-over-reverse)."""
    _check_blocks(f, blocks, (name,))
    if len(v) != len(blocks[name]):
        raise BadArgument(f"direction length {len(v)} != block length {len(blocks[name])}")
    params = {n: Var(blocks[n].values, requires_grad=(n == name)) for n in f.names}
    out = f(params, batch)
    if not np.isfinite(float(out.value)):
        raise NonFiniteLoss("loss is not finite")
    (g,) = backward(out, [params[name]], create_graph=True)
    inner = dot(g, const(v.values))
    (hv,) = backward(inner, [params[name]])
    return ParamVector(hv.astype(blocks[name].dtype, copy=False))
