"""Differentiable cell search space: mixed operations, supernet, genotypes."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from lpt import autodiff as ad
from lpt.errors import BadArgument

VECTOR_OPS = ("zero", "identity", "linear", "tanh_mlp")
IMAGE_OPS = ("zero", "identity", "conv_3x3", "avg_pool_3x3")
# the full convolutional space is recognised but not buildable at this scale
UNSUPPORTED_OPS = frozenset(
    {"sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5", "max_pool_3x3", "skip_connect", "none"}
)
PARAMETRIC = {"linear", "tanh_mlp", "conv_3x3"}


@dataclass(frozen=True)
class CellSpec:
    """Cell DAG: node 0 is the cell input, the last node averages the intermediates.

    ``num_nodes`` counts input and output nodes, so a cell has
    ``num_nodes - 2`` intermediate nodes.
    """

    num_nodes: int = 7
    num_cells: int = 1
    ops: tuple = VECTOR_OPS
    width: int = 16
    k_in: int = 2

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if self.num_nodes < 3:
            raise BadArgument("num_nodes must be >= 3")
        if self.num_cells < 1 or self.width < 1 or self.k_in < 1:
            raise BadArgument("num_cells, width and k_in must be positive")
        if not self.ops:
            raise BadArgument("candidate op list is empty")
        if "zero" not in self.ops or "identity" not in self.ops:
            raise BadArgument("candidate ops must include 'zero' and 'identity'")
        if len(set(self.ops)) != len(self.ops):
            raise BadArgument("duplicate candidate ops")
        bad = [o for o in self.ops if o in UNSUPPORTED_OPS]
        if bad:
            raise BadArgument(f"ops not supported at desk scale: {bad}")
        unknown = [o for o in self.ops if o not in VECTOR_OPS + IMAGE_OPS]
        if unknown:
            raise BadArgument(f"unknown ops: {unknown}")

    @property
    def num_intermediate(self) -> int:
        return self.num_nodes - 2

    @property
    def edges(self) -> list:
        """``(src, dst)`` pairs in canonical order (by dst, then src)."""
        return [(j, i) for i in range(1, self.num_intermediate + 1) for j in range(i)]

    @property
    def num_edges(self) -> int:
        m = self.num_intermediate
        return m * (m + 1) // 2

    @property
    def arch_size(self) -> int:
        return self.num_edges * len(self.ops)

    @property
    def image(self) -> bool:
        return any(o in ("conv_3x3", "avg_pool_3x3") for o in self.ops)


# ---------------------------------------------------------------- parameter layout


class Layout:
    """Named slices of a flat parameter vector."""

    def __init__(self):
        self.entries = {}
        self.size = 0

    def add(self, name, shape, fan_in=None):
        shape = tuple(shape)
        n = int(np.prod(shape))
        self.entries[name] = (self.size, shape, fan_in)
        self.size += n

    def unpack(self, flat: ad.Var) -> dict:
        out = {}
        for name, (off, shape, _) in self.entries.items():
            n = int(np.prod(shape))
            out[name] = ad.reshape(flat[off : off + n], shape)
        return out

    def pack(self, arrays: dict, dtype=np.float64) -> np.ndarray:
        flat = np.zeros(self.size, dtype=dtype)
        for name, (off, shape, _) in self.entries.items():
            flat[off : off + int(np.prod(shape))] = np.asarray(arrays[name]).reshape(-1)
        return flat

    def init(self, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
        flat = np.zeros(self.size, dtype=dtype)
        for name, (off, shape, fan_in) in self.entries.items():
            if fan_in:
                n = int(np.prod(shape))
                flat[off : off + n] = rng.standard_normal(n) / np.sqrt(fan_in)
        return flat


def _add_op_params(layout: Layout, prefix: str, op: str, width: int):
    if op in ("linear", "tanh_mlp"):
        layout.add(f"{prefix}/M", (width, width), fan_in=width)
        layout.add(f"{prefix}/b", (width,))
    elif op == "conv_3x3":
        layout.add(f"{prefix}/K", (width, width, 3, 3), fan_in=9 * width)
        layout.add(f"{prefix}/b", (width,))


def apply_op(op: str, x: ad.Var, p: dict, prefix: str) -> ad.Var | None:
    """Evaluate one candidate op; ``None`` stands for the zero op."""
    if op == "zero":
        return None
    if op == "identity":
        return x
    if op == "linear":
        return ad.matmul(x, p[f"{prefix}/M"]) + p[f"{prefix}/b"]
    if op == "tanh_mlp":
        return ad.tanh(ad.matmul(x, p[f"{prefix}/M"]) + p[f"{prefix}/b"])
    if op == "conv_3x3":
        b = ad.reshape(p[f"{prefix}/b"], (1, -1, 1, 1))
        return ad.tanh(ad.conv3x3(x, p[f"{prefix}/K"]) + b)
    if op == "avg_pool_3x3":
        return ad.avgpool3x3(x)
    raise BadArgument(f"unknown op {op!r}")


def mixed_op_forward(a_edge, x, ops, params=None, prefix="") -> ad.Var:
    """``sum_k softmax(a_edge)_k * op_k(x)``."""
    a_edge = ad._as_var(a_edge)
    x = ad._as_var(x)
    if a_edge.shape != (len(ops),):
        raise BadArgument(f"a_edge has shape {a_edge.shape}, expected ({len(ops)},)")
    weights = ad.softmax(a_edge)
    out = None
    for k, op in enumerate(ops):
        y = apply_op(op, x, params or {}, f"{prefix}/{op}")
        if y is None:
            continue
        term = ad.mul(weights[k], y)
        out = term if out is None else ad.add(out, term)
    if out is None:
        out = ad.mul(ad.vsum(weights), ad.const(np.zeros(x.shape, dtype=x.dtype)))
    return out


# ---------------------------------------------------------------- networks


class _Backbone:
    """Stem, stacked cells and classifier shared by supernet and fixed networks."""

    def __init__(self, spec: CellSpec, input_dim: int, num_classes: int, image_shape=None):
        if spec.image and image_shape is None:
            raise BadArgument("image ops need an image_shape")
        self.spec = spec
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.image_shape = tuple(image_shape) if image_shape is not None else None
        self.layout = Layout()
        w = spec.width
        if self.image_shape:
            self.layout.add("stem/K", (w, self.image_shape[0], 3, 3), fan_in=9 * self.image_shape[0])
            self.layout.add("stem/b", (w,))
        else:
            self.layout.add("stem/M", (self.input_dim, w), fan_in=self.input_dim)
            self.layout.add("stem/b", (w,))
        self._add_cell_params()
        self.layout.add("head/M", (w, self.num_classes), fan_in=w)
        self.layout.add("head/b", (self.num_classes,))

    @property
    def weight_size(self) -> int:
        return self.layout.size

    def init_weights(self, rng, dtype=np.float64) -> np.ndarray:
        return self.layout.init(rng, dtype)

    def _stem(self, p, x):
        if self.image_shape:
            xi = ad.const(x.reshape((x.shape[0],) + self.image_shape))
            return ad.tanh(ad.conv3x3(xi, p["stem/K"]) + ad.reshape(p["stem/b"], (1, -1, 1, 1)))
        return ad.tanh(ad.matmul(ad.const(x), p["stem/M"]) + p["stem/b"])

    def _head(self, p, h):
        if self.image_shape:
            n, c = h.shape[:2]
            h = ad.mean(ad.reshape(h, (n, c, -1)), axis=2)
        return ad.matmul(h, p["head/M"]) + p["head/b"]

    def _cells(self, p, h, A):
        m = self.spec.num_intermediate
        for c in range(self.spec.num_cells):
            states = [h]
            for i in range(1, m + 1):
                node = None
                for j, term in self._node_inputs(p, A, c, i, states):
                    node = term if node is None else ad.add(node, term)
                if node is None:
                    node = ad.const(np.zeros(h.shape, dtype=h.dtype))
                states.append(node)
            total = states[1]
            for s in states[2:]:
                total = ad.add(total, s)
            h = ad.mul(total, h.dtype.type(1.0 / m))
        return h

    def logits(self, W, x, A=None) -> ad.Var:
        W = ad._as_var(W)
        x = np.asarray(x, dtype=W.dtype)
        p = self.layout.unpack(W)
        return self._head(p, self._cells(p, self._stem(p, x), A))


class SuperNet(_Backbone):
    """Continuous relaxation: every edge carries a softmax mixture of all ops.

    Architecture variables are shared by all stacked cells; each cell has its
    own op weights.
    """

    def _add_cell_params(self):
        for c in range(self.spec.num_cells):
            for e, _ in enumerate(self.spec.edges):
                for op in self.spec.ops:
                    _add_op_params(self.layout, f"cell{c}/edge{e}/{op}", op, self.spec.width)

    def _node_inputs(self, p, A, c, i, states):
        ops = self.spec.ops
        for e, (j, dst) in enumerate(self.spec.edges):
            if dst != i:
                continue
            a_edge = A[e * len(ops) : (e + 1) * len(ops)]
            yield j, mixed_op_forward(a_edge, states[j], ops, p, f"cell{c}/edge{e}")

    def forward(self, A, W, x) -> ad.Var:
        A = ad._as_var(A)
        if A.shape != (self.spec.arch_size,):
            raise BadArgument(f"A has shape {A.shape}, expected ({self.spec.arch_size},)")
        W = ad._as_var(W)
        if W.shape != (self.weight_size,):
            raise BadArgument(f"W has shape {W.shape}, expected ({self.weight_size},)")
        x = np.asarray(x)
        expected = int(np.prod(self.image_shape)) if self.image_shape else self.input_dim
        if x.ndim != 2 or x.shape[1] != expected:
            raise BadArgument(f"input has shape {x.shape}, expected (n, {expected})")
        return self.logits(W, x, A)

    def init_arch(self, dtype=np.float64) -> np.ndarray:
        return np.zeros(self.spec.arch_size, dtype=dtype)


def network_forward(net: SuperNet, A, W, x) -> ad.Var:
    """Logits of the supernet for inputs ``x`` (rows)."""
    if isinstance(A, ad.ParamVector):
        A = A.values
    if isinstance(W, ad.ParamVector):
        W = W.values
    return net.forward(A, W, x)


# ---------------------------------------------------------------- genotypes


@dataclass(frozen=True)
class Genotype:
    """Retained incoming edges per intermediate node: ``((node, ((src, op), ...)), ...)``."""

    nodes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        nodes = tuple((int(n), tuple((int(s), str(o)) for s, o in edges)) for n, edges in self.nodes)
        object.__setattr__(self, "nodes", nodes)
        for n, edges in nodes:
            for s, o in edges:
                if o == "zero":
                    raise BadArgument("a genotype may not retain the zero op")
                if not 0 <= s < n:
                    raise BadArgument(f"edge {s}->{n} is not a forward edge")

    def to_dict(self) -> dict:
        return {"nodes": [{"node": n, "edges": [{"from": s, "op": o} for s, o in edges]} for n, edges in self.nodes]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "Genotype":
        try:
            return cls(tuple((e["node"], tuple((x["from"], x["op"]) for x in e["edges"])) for e in d["nodes"]))
        except (KeyError, TypeError) as exc:
            raise BadArgument(f"malformed genotype: {exc}") from None

    @classmethod
    def from_json(cls, text) -> "Genotype":
        return cls.from_dict(json.loads(text))

    def check(self, spec: CellSpec):
        m = spec.num_intermediate
        if [n for n, _ in self.nodes] != list(range(1, m + 1)):
            raise BadArgument(f"genotype must list nodes 1..{m}")
        for n, edges in self.nodes:
            if len(edges) != min(spec.k_in, n):
                raise BadArgument(f"node {n} retains {len(edges)} edges, expected {min(spec.k_in, n)}")
            if len({s for s, _ in edges}) != len(edges):
                raise BadArgument(f"node {n} retains a duplicate edge")
            for _, o in edges:
                if o not in spec.ops:
                    raise BadArgument(f"op {o!r} is not in the candidate list")


def discretize(spec: CellSpec, A) -> Genotype:
    """Per edge pick the strongest non-zero op; per node keep the ``k_in`` strongest edges.

    Ties break toward the lower op index and the lower edge index.
    """
    if isinstance(A, ad.ParamVector):
        A = A.values
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (spec.arch_size,) or not np.all(np.isfinite(A)):
        raise BadArgument("A must be a finite vector of length #edges * #ops")
    a = A.reshape(spec.num_edges, len(spec.ops))
    z = a - a.max(axis=1, keepdims=True)
    w = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    allowed = [k for k, o in enumerate(spec.ops) if o != "zero"]
    best_op, strength = [], []
    for e in range(spec.num_edges):
        k = allowed[int(np.argmax(w[e, allowed]))]
        best_op.append(spec.ops[k])
        strength.append(w[e, k])
    nodes = []
    for i in range(1, spec.num_intermediate + 1):
        incoming = [e for e, (_, dst) in enumerate(spec.edges) if dst == i]
        ranked = sorted(incoming, key=lambda e: (-strength[e], e))[: min(spec.k_in, i)]
        nodes.append((i, tuple((spec.edges[e][0], best_op[e]) for e in sorted(ranked))))
    return Genotype(tuple(nodes))


def all_genotypes(spec: CellSpec) -> list:
    """Every discrete genotype of the space, in a fixed order."""
    choices = [o for o in spec.ops if o != "zero"]
    per_node = []
    for i in range(1, spec.num_intermediate + 1):
        options = []
        for srcs in itertools.combinations(range(i), min(spec.k_in, i)):
            for ops in itertools.product(choices, repeat=len(srcs)):
                options.append(tuple(zip(srcs, ops)))
        per_node.append(options)
    return [Genotype(tuple((i + 1, edges) for i, edges in enumerate(combo))) for combo in itertools.product(*per_node)]


class FixedNetwork(_Backbone):
    """The discrete network a genotype describes (one op per retained edge)."""

    def __init__(self, genotype: Genotype, spec: CellSpec, input_dim, num_classes, image_shape=None):
        genotype.check(spec)
        self.genotype = genotype
        super().__init__(spec, input_dim, num_classes, image_shape)

    def _add_cell_params(self):
        for c in range(self.spec.num_cells):
            for n, edges in self.genotype.nodes:
                for s, op in edges:
                    _add_op_params(self.layout, f"cell{c}/n{n}s{s}/{op}", op, self.spec.width)

    def _node_inputs(self, p, A, c, i, states):
        for n, edges in self.genotype.nodes:
            if n != i:
                continue
            for s, op in edges:
                y = apply_op(op, states[s], p, f"cell{c}/n{n}s{s}/{op}")
                if y is not None:
                    yield s, y
