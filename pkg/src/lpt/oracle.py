"""Brute-force reference values: central differences, closed-form bilevel
solutions, exhaustive genotype ranking, and the check suites built on them.

Composed objectives here recompute every one-step unroll on their own so a
hypergradient is never checked against itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from lpt import autodiff as ad
from lpt.autodiff import DifferentiableFn, ParamVector
from lpt.errors import BadArgument, IllConditioned, NonFiniteLoss

MAX_ORACLE_PARAMS = 20


def numerical_grad(objective, theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a black-box scalar map, in float64."""
    theta = np.array(theta.values if isinstance(theta, ParamVector) else theta, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = eps
        hi, lo = float(objective(theta + step)), float(objective(theta - step))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteLoss(f"non-finite probe at coordinate {i}")
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(got, ref, floor: float = 1e-8) -> float:
    """``max|got - ref| / max(max|ref|, floor)``."""
    got = np.asarray(got.values if isinstance(got, ParamVector) else got, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    return float(np.max(np.abs(got - ref)) / max(float(np.max(np.abs(ref))), floor))


# ---------------------------------------------------------------- quadratic bilevel


@dataclass
class QuadraticBilevel:
    """Inner ``1/2 w'Hw + w'(Ga + b)``; outer ``1/2 w'Qw + q'w + 1/2 a'Ra``."""

    H: np.ndarray
    G: np.ndarray
    b: np.ndarray
    Q: np.ndarray | None = None
    q: np.ndarray | None = None
    R: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        self.G = np.atleast_2d(np.asarray(self.G, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        nw, na = self.G.shape
        if self.H.shape != (nw, nw) or self.b.shape != (nw,):
            raise BadArgument("H, G, b have inconsistent shapes")
        if max(nw, na) > 8:
            raise BadArgument("quadratic bilevel instances are limited to 8 dimensions")
        if not np.allclose(self.H, self.H.T):
            raise BadArgument("H must be symmetric")
        self.Q = np.eye(nw) if self.Q is None else np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        self.q = np.zeros(nw) if self.q is None else np.asarray(self.q, dtype=np.float64).reshape(-1)
        self.R = np.zeros((na, na)) if self.R is None else np.atleast_2d(np.asarray(self.R, dtype=np.float64))

    def inner_grad_w(self, a, w):
        return self.H @ w + self.G @ a + self.b

    def outer(self, a, w):
        return 0.5 * w @ self.Q @ w + self.q @ w + 0.5 * a @ self.R @ a


def quadratic_bilevel_exact(problem: QuadraticBilevel, a):
    """``w*(a) = -H^-1 (Ga + b)`` and the exact gradient of ``outer(a, w*(a))``."""
    eig = np.linalg.eigvalsh(problem.H)
    if eig.min() <= 0:
        raise BadArgument("H must be positive definite")
    if eig.max() / eig.min() > 1e8:
        raise IllConditioned(f"cond(H) = {eig.max() / eig.min():.3g}")
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    w_star = -np.linalg.solve(problem.H, problem.G @ a + problem.b)
    dw_da = -np.linalg.solve(problem.H, problem.G)
    hyper = problem.R @ a + dw_da.T @ (problem.Q @ w_star + problem.q)
    return w_star, hyper


def quadratic_bilevel_one_step(problem: QuadraticBilevel, a, w, xi):
    """Gradient of ``outer(a, w - xi * grad_w inner(a, w))`` in ``a``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    w1 = w - xi * problem.inner_grad_w(a, w)
    return problem.R @ a + (-xi * problem.G).T @ (problem.Q @ w1 + problem.q)


# ---------------------------------------------------------------- composed objectives


def _vg(f, blocks, batch, wrt):
    return ad.value_and_grad(f, blocks, batch, wrt)


def composed_arch_objective(net, W, weights, bank, batch_tr, xi_ln):
    """``A -> normalized test loss at W - xi_ln * grad_W L_train(A, W)``."""
    from lpt.learner import per_example_loss, train_loss

    train = DifferentiableFn(("A", "W"), lambda p, b: train_loss(net, p["A"], p["W"], b))
    f = np.asarray(weights, dtype=np.float64)

    def objective(a):
        A = ParamVector(a)
        _, g = _vg(train, {"A": A, "W": W}, batch_tr, ("W",))
        W1 = W.values - xi_ln * g["W"].values
        losses = per_example_loss(net, a, W1, bank).value
        return float(np.sum(f * losses) / np.sum(f))

    return objective


def _tester_step(tnet, E, X, C, tt, bank, gamma, xi_E, xi_X, test_only=False):
    from lpt.tester import ablation2_stage2, stage2_loss

    def rule(p, _):
        if test_only:
            return ablation2_stage2(tnet, p["E"], p["X"], p["C"], bank, gamma)
        return stage2_loss(tnet, p["E"], p["X"], p["C"], tt, bank, gamma)

    _, g = _vg(DifferentiableFn(("E", "X", "C"), rule), {"E": E, "X": X, "C": C}, None, ("E", "X"))
    return E.values - xi_E * g["E"].values, X.values - xi_X * g["X"].values


def composed_creator_val(tnet, E, X, tt, bank, val_batch, gamma, xi_E, xi_X, test_only=False):
    """``C -> tester validation loss at the one-step unrolled (E'(C), X'(C))``."""
    from lpt.tester import val_loss

    def objective(c):
        E1, X1 = _tester_step(tnet, E, X, ParamVector(c), tt, bank, gamma, xi_E, xi_X, test_only)
        return float(val_loss(tnet, E1, X1, val_batch).value)

    return objective


def composed_creator_difficulty(tnet, E, X, losses, tt, bank, gamma, xi_E, xi_X, test_only=False):
    """``C -> sum f(C, E'(C)) loss / sum f(C, E'(C))`` for fixed per-example ``losses``."""
    from lpt.tester import selection_weights

    losses = np.asarray(losses, dtype=np.float64)

    def objective(c):
        E1, _ = _tester_step(tnet, E, X, ParamVector(c), tt, bank, gamma, xi_E, xi_X, test_only)
        f = selection_weights(tnet, E1, c, bank).value
        return float(np.sum(f * losses) / np.sum(f))

    return objective


def composed_creator_objective(tnet, E, X, losses, tt, bank, val_batch, gamma, lam, xi_E, xi_X):
    diff = composed_creator_difficulty(tnet, E, X, losses, tt, bank, gamma, xi_E, xi_X)
    val = composed_creator_val(tnet, E, X, tt, bank, val_batch, gamma, xi_E, xi_X)
    return lambda c: diff(c) - lam * val(c)


# ---------------------------------------------------------------- genotype enumeration


def enumerate_genotypes(spec, train_data, test_data, config, seed=None, max_count=200):
    """Train every genotype of a tiny space with one budget and seed; rank by held-out error.

    Returns ``[(genotype, error), ...]`` sorted by error, then enumeration order.
    """
    from lpt.engine import run_eval
    from lpt.search_space import all_genotypes

    genotypes = all_genotypes(spec)
    if len(genotypes) > max_count:
        raise BadArgument(f"{len(genotypes)} genotypes exceed the enumeration cap of {max_count}")
    scored = []
    for i, g in enumerate(genotypes):
        scored.append((run_eval(g, config, train_data, test_data, seed=seed, spec=spec), i, g))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [(g, err) for err, _, g in scored]


def rank_fraction(ranking, genotype) -> float:
    """Share of enumerated genotypes with strictly lower error than ``genotype``."""
    errors = {g: e for g, e in ranking}
    if genotype not in errors:
        raise BadArgument("genotype is not in the ranking")
    target = errors[genotype]
    return sum(1 for _, e in ranking if e < target) / len(ranking)


# ---------------------------------------------------------------- report


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tolerance)

    def to_dict(self):
        return {"name": self.name, "max_rel_err": self.max_rel_err, "tolerance": self.tolerance, "pass": self.passed}


@dataclass
class OracleReport:
    checks: list = field(default_factory=list)

    def add(self, name, err, tol) -> CheckResult:
        r = CheckResult(name, float(err), float(tol))
        self.checks.append(r)
        return r

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def write(self, path):
        with open(path, "w") as fh:
            json.dump([c.to_dict() for c in self.checks], fh, indent=2)


# ---------------------------------------------------------------- check suites

AUTODIFF_TOL = 1e-5
HYPERGRAD_TOL = 1e-3
BILEVEL_TOL = 1e-8
FD_SCALES = (1e-1, 1e-2, 1e-3)


@dataclass
class TinyProblem:
    """A learner and a tester small enough for coordinate-wise probing (float64)."""

    net: object
    A: ParamVector
    W: ParamVector
    weights: np.ndarray
    tr: object
    bank: object
    tt: object
    val: object
    tnet: object
    E: ParamVector
    C: ParamVector
    X: ParamVector


def tiny_problem(seed: int, image=False) -> TinyProblem:
    from lpt.data import synth_two_class
    from lpt.search_space import CellSpec, SuperNet
    from lpt.tester import TesterNet

    rng = np.random.default_rng(seed)
    if image:
        n, shape = 24, (1, 3, 3)
        x = rng.normal(size=(n, 9))
        y = (x[:, 4] > 0).astype(int)
        from lpt.data import Dataset

        data = Dataset(np.arange(n), x, y, 2, image_shape=shape)
        spec = CellSpec(num_nodes=3, ops=("zero", "identity", "conv_3x3", "avg_pool_3x3"), width=2)
    else:
        n, shape = 24, None
        data = synth_two_class(n, noise=0.2, corrupt_frac=0.1, seed=seed)
        spec = CellSpec(num_nodes=3, ops=("zero", "identity", "tanh_mlp"), width=2)
    q = n // 4
    tr, bank, tt, val = (data.subset(range(i * q, (i + 1) * q)) for i in range(4))
    net = SuperNet(spec, data.dim, 2, shape)
    A = ParamVector(rng.normal(size=spec.arch_size))
    W = ParamVector(net.init_weights(rng))
    tnet = TesterNet(data.dim, 2, hidden=3, latent=2, image_shape=shape)
    E, _, X = tnet.init(rng)
    C = ParamVector(rng.normal(size=tnet.cre.size))
    weights = rng.uniform(0.2, 0.9, len(bank))
    return TinyProblem(net, A, W, weights, tr, bank, tt, val, tnet, E, C, X)


def _check_fn(fn, blocks, batch, eps=1e-5) -> float:
    """Worst relative error of value_and_grad against central differences, block by block."""
    _, grads = ad.value_and_grad(fn, blocks, batch, tuple(fn.names))
    worst = 0.0
    for name in fn.names:
        def objective(theta, name=name):
            probe = dict(blocks)
            probe[name] = ParamVector(theta)
            return fn.evaluate(probe, batch)

        worst = max(worst, rel_err(grads[name], numerical_grad(objective, blocks[name], eps)))
    return worst


def _loss_fns(p: TinyProblem, gamma):
    from lpt.learner import test_loss_fn, train_loss_fn, weighted_sum, per_example_loss
    from lpt.search_space import FixedNetwork, discretize
    from lpt.tester import bank_term_fn, stage2_fn, val_fn
    from lpt import hypergrad as hg

    learner = {"A": p.A, "W": p.W}
    tester = {"E": p.E, "X": p.X, "C": p.C}
    weighted = DifferentiableFn(
        ("A", "W"), lambda q, b: weighted_sum(p.weights, per_example_loss(p.net, q["A"], q["W"], b))
    )
    num, den = hg._selection_fns(p.tnet, np.linspace(0.1, 2.0, len(p.bank)))
    fixed = FixedNetwork(discretize(p.net.spec, p.A), p.net.spec, p.tr.dim, 2, p.tr.image_shape)
    Wf = ParamVector(fixed.init_weights(np.random.default_rng(0)))
    fixed_fn = DifferentiableFn(("W",), lambda q, b: ad.mean(ad.cross_entropy(fixed.logits(q["W"], b.inputs), b.labels)))
    s = ParamVector(np.linspace(-1.0, 1.0, len(p.bank)))
    losses = np.linspace(0.2, 1.5, len(p.bank))
    positions = np.arange(len(p.bank))
    abl1 = DifferentiableFn(("s",), lambda q, _: _abl1_rule(q["s"], positions, losses))
    return [
        ("train_loss", train_loss_fn(p.net), learner, p.tr),
        ("weighted_test_loss", weighted, learner, p.bank),
        ("normalized_test_loss", test_loss_fn(p.net, p.weights), learner, p.bank),
        ("stage2_loss", stage2_fn(p.tnet, gamma), tester, (p.tt, p.bank)),
        ("ablation2_stage2", stage2_fn(p.tnet, gamma, test_only=True), tester, (p.tt, p.bank)),
        ("bank_term", bank_term_fn(p.tnet), tester, p.bank),
        ("val_loss", val_fn(p.tnet), {"E": p.E, "X": p.X}, p.val),
        ("selection_numerator", num, {"C": p.C, "E": p.E}, p.bank),
        ("selection_cardinality", den, {"C": p.C, "E": p.E}, p.bank),
        ("ablation1_difficulty", abl1, {"s": s}, None),
        ("eval_loss", fixed_fn, {"W": Wf}, p.tr),
    ]


def _abl1_rule(s, positions, losses):
    f = ad.sigmoid(s[positions])
    return ad.div(ad.vsum(ad.mul(f, losses)), ad.vsum(f))


def ablation1_error(seed: int) -> float:
    from lpt import hypergrad as hg

    rng = np.random.default_rng(seed)
    s, losses = rng.normal(size=8), rng.uniform(0.1, 2.0, 5)
    positions = np.array([0, 2, 3, 5, 7])

    def objective(theta):
        f = 1 / (1 + np.exp(-theta[positions]))
        return np.sum(f * losses) / np.sum(f)

    _, g = hg.ablation1_difficulty_grad(ParamVector(s), positions, losses)
    return rel_err(g, numerical_grad(objective, s))


def suite_autodiff(report: OracleReport, instances: int = 20) -> OracleReport:
    worst = {}
    for seed in range(instances):
        for image in (False, True):
            p = tiny_problem(seed, image=image)
            for name, fn, blocks, batch in _loss_fns(p, gamma=0.5 + 0.1 * seed):
                if image and name in ("ablation1_difficulty",):
                    continue
                key = f"autodiff/{name}" + ("[image]" if image else "")
                worst[key] = max(worst.get(key, 0.0), _check_fn(fn, blocks, batch))
    worst["autodiff/ablation1_selection_grad"] = max(ablation1_error(seed) for seed in range(instances))
    for key, err in worst.items():
        report.add(key, err, AUTODIFF_TOL)
    return report


def _unroll(xi, scale=1e-2, first_order=False):
    from lpt.hypergrad import UnrollConfig

    return UnrollConfig(xi_ln=xi, xi_E=xi, xi_X=xi, fd_epsilon_scale=scale, first_order=first_order)


def arch_errors(p: TinyProblem, xi=0.5) -> list:
    """Relative error of the architecture hypergradient at each FD scale."""
    from lpt import hypergrad as hg

    ref = numerical_grad(composed_arch_objective(p.net, p.W, p.weights, p.bank, p.tr, xi), p.A)
    return [rel_err(hg.arch_hypergradient(p.net, p.A, p.W, p.weights, p.bank, p.tr, _unroll(xi, s)), ref)
            for s in FD_SCALES]


def suite_hypergrad(report: OracleReport, instances: int = 10) -> OracleReport:
    worst, monotone = 0.0, 0
    for seed in range(instances):
        errs = arch_errors(tiny_problem(100 + seed))
        worst = max(worst, errs[1])
        monotone += all(a > b for a, b in zip(errs, errs[1:]))
    report.add("hypergrad/arch_default_scale", worst, HYPERGRAD_TOL)
    # 0 when every instance shrinks its error as the probe size shrinks
    report.add("hypergrad/arch_instances_not_monotone_in_scale", float(instances - monotone), 0.0)
    return report


def creator_errors(p: TinyProblem, gamma=1.0, lam=1.0, xi=0.5) -> dict:
    from lpt import hypergrad as hg
    from lpt.learner import per_example_loss

    cfg = _unroll(xi)
    E1, X1 = hg.tester_unroll(p.tnet, p.E, p.X, p.C, p.tt, p.bank, gamma, cfg)
    g_val = hg.creator_grad_val(p.tnet, p.E, p.X, p.C, E1, X1, p.bank, p.val, gamma, cfg)
    W1 = hg.learner_unroll(p.net, p.A, p.W, p.tr, xi)
    g_diff = hg.creator_grad_difficulty(p.net, p.A, W1, p.tnet, p.E, p.X, p.C, E1, p.bank, gamma, cfg)
    losses = per_example_loss(p.net, p.A, W1, p.bank).value
    ref_val = numerical_grad(composed_creator_val(p.tnet, p.E, p.X, p.tt, p.bank, p.val, gamma, xi, xi), p.C)
    ref_diff = numerical_grad(
        composed_creator_difficulty(p.tnet, p.E, p.X, losses, p.tt, p.bank, gamma, xi, xi), p.C
    )
    ref_total = numerical_grad(
        composed_creator_objective(p.tnet, p.E, p.X, losses, p.tt, p.bank, p.val, gamma, lam, xi, xi), p.C
    )
    return {
        "val": rel_err(g_val, ref_val),
        "difficulty": rel_err(g_diff, ref_diff),
        "total": rel_err(hg.creator_total_grad(g_diff, g_val, lam), ref_total),
    }


def suite_creator(report: OracleReport, instances: int = 10) -> OracleReport:
    worst = {}
    for seed in range(instances):
        for k, v in creator_errors(tiny_problem(200 + seed), gamma=0.5 + 0.25 * (seed % 4)).items():
            worst[k] = max(worst.get(k, 0.0), v)
    for k, v in worst.items():
        report.add(f"creator/{k}", v, HYPERGRAD_TOL)
    return report


def random_bilevel(seed: int, nw=4, na=3) -> QuadraticBilevel:
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(nw, nw))
    H = M @ M.T / nw + np.eye(nw)
    Qm = rng.normal(size=(nw, nw))
    return QuadraticBilevel(H, rng.normal(size=(nw, na)), rng.normal(size=nw), Qm @ Qm.T / nw + np.eye(nw),
                            rng.normal(size=nw), np.eye(na) * 0.1)


def suite_bilevel(report: OracleReport, instances: int = 10) -> OracleReport:
    worst_step, worst_exact = 0.0, 0.0
    for seed in range(instances):
        prob = random_bilevel(300 + seed)
        rng = np.random.default_rng(seed)
        a, w = rng.normal(size=prob.G.shape[1]), rng.normal(size=prob.G.shape[0])

        def unrolled(av):
            w1 = w - 0.1 * prob.inner_grad_w(av, w)
            return prob.outer(av, w1)

        worst_step = max(worst_step, rel_err(quadratic_bilevel_one_step(prob, a, w, 0.1), numerical_grad(unrolled, a)))
        w_star, hyper = quadratic_bilevel_exact(prob, a)

        def exact(av):
            return prob.outer(av, -np.linalg.solve(prob.H, prob.G @ av + prob.b))

        worst_exact = max(worst_exact, rel_err(hyper, numerical_grad(exact, a)))
    report.add("bilevel/one_step_closed_form", worst_step, 1e-6)
    report.add("bilevel/exact_closed_form", worst_exact, 1e-6)
    # a scalar inner problem stepped by xi = 1/h from any w lands on w*, so both agree
    h = 2.5
    prob = QuadraticBilevel([[h]], [[1.5]], [0.3], [[1.0]], [0.2], [[0.1]])
    a = np.array([0.7])
    newton = quadratic_bilevel_one_step(prob, a, np.array([-4.0]), 1.0 / h)
    report.add("bilevel/newton_step_is_exact", rel_err(newton, quadratic_bilevel_exact(prob, a)[1]), BILEVEL_TOL)
    return report


SUITES = {
    "autodiff": suite_autodiff,
    "hypergrad": suite_hypergrad,
    "creator": suite_creator,
    "bilevel": suite_bilevel,
}


def run_suite(name: str) -> OracleReport:
    if name != "all" and name not in SUITES:
        raise BadArgument(f"unknown oracle suite {name!r}; choose from all, {', '.join(SUITES)}")
    report = OracleReport()
    for key, fn in SUITES.items():
        if name in ("all", key):
            fn(report)
    return report
