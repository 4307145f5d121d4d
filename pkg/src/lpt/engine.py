"""The alternating four-phase update loop, search runs and evaluation runs.

Each ``lpt_step`` performs, in order:

1. architecture ``A``: descent on the unrolled architecture hypergradient;
2. creator ``C``: ascent on difficulty minus ``lambda`` times meaningfulness;
3. encoder/executor ``(E, X)``: one momentum-SGD step on the tester loss;
4. weights ``W``: one momentum-SGD step on the training loss.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lpt import autodiff as ad
from lpt import hypergrad as hg
from lpt.autodiff import ParamVector
from lpt.config import LptConfig
from lpt.data import (
    BatchStream,
    Dataset,
    SplitSpec,
    Splits,
    batch_iterator,
    corrupt_labels,
    make_splits,
    read_lptd,
    synth_two_class,
)
from lpt.errors import DegenerateTest
from lpt.learner import LearnerState, per_example_loss, train_loss_fn, weights_step
from lpt.optim import SGD
from lpt.search_space import FixedNetwork, Genotype, SuperNet, discretize
from lpt.tester import TesterNet, TesterState, ablation1_selection, selection_weights, stage2_fn

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "epoch",
    "train_loss",
    "stage2_loss",
    "val_loss",
    "norm_test_loss",
    "card_sigma",
    "mean_f_clean",
    "mean_f_corrupted",
)
PHASES = ("arch", "creator", "tester", "weights")


def _seeds(seed: int, n: int) -> list:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n)]


@dataclass
class LptState:
    config: LptConfig
    learner: LearnerState
    tester: TesterState
    bank_positions: dict
    step: int = 0
    epoch: int = 0
    seeds: dict = field(default_factory=dict)
    last_metrics: dict = field(default_factory=dict)

    def blocks(self) -> dict:
        out = {"A": self.learner.A, "W": self.learner.W, "E": self.tester.E, "C": self.tester.C, "X": self.tester.X}
        if self.tester.s is not None:
            out["s"] = self.tester.s
        return out


def init_state(config: LptConfig, splits: Splits) -> LptState:
    dtype = ad.resolve_dtype(config.precision)
    spec = config.cell.spec()
    ln = splits.ln_tr
    net = SuperNet(spec, ln.dim, ln.num_classes, ln.image_shape)
    tnet = TesterNet(
        ln.dim, ln.num_classes, config.tester.hidden, config.tester.latent, ln.image_shape, config.tester.label_aware
    )
    s_init, s_w, s_t, s_ln, s_tt, s_val, s_bank = _seeds(config.seed, 7)
    learner = LearnerState.create(
        net,
        np.random.default_rng(s_w),
        dtype,
        w_opt=config.optim.weights.build(),
        a_opt=config.optim.arch.build(),
    )
    bank_size = len(splits.bank) if config.mode == "ablation1" else None
    tester = TesterState.create(tnet, np.random.default_rng(s_t), dtype, bank_size=bank_size)
    tester.e_opt = config.optim.encoder_executor.build()
    tester.x_opt = config.optim.encoder_executor.build()
    tester.c_opt = config.optim.creator.build()
    seeds = {"init": s_init, "ln_tr": s_ln, "tt_tr": s_tt, "tt_val": s_val, "bank": s_bank}
    return LptState(config, learner, tester, splits.bank.position_of(), seeds=seeds)


def current_weights(state: LptState, bank: Dataset) -> np.ndarray:
    """Selection weights the learner sees for ``bank`` under the configured mode."""
    cfg = state.config
    dtype = state.learner.W.dtype
    if cfg.mode == "darts_baseline":
        return np.ones(len(bank), dtype=dtype)
    if cfg.selection_override is not None:
        return np.full(len(bank), cfg.selection_override, dtype=dtype)
    if cfg.mode == "ablation1":
        pos = [state.bank_positions[int(i)] for i in bank.ids]
        return ablation1_selection(state.tester.s.values[pos]).value
    return selection_weights(state.tester.tnet, state.tester.E, state.tester.C, bank).value


def _mean_or_nan(x):
    return float(np.mean(x)) if len(x) else float("nan")


def lpt_step(state: LptState, batches: dict, phase_hook=None) -> LptState:
    """One pass of the four phases on the given role batches. Mutates and returns ``state``.

    ``phase_hook(phase, state)`` is called after each phase.
    """
    cfg = state.config
    L, T = state.learner, state.tester
    net, tnet = L.net, T.tnet
    ln, tt, val, bank = batches["ln_tr"], batches["tt_tr"], batches["tt_val"], batches["bank"]
    ep, total = state.epoch, cfg.epochs
    tester_active = cfg.mode in ("full", "ablation2")
    creator_active = cfg.mode != "darts_baseline" and cfg.selection_override is None and not cfg.freeze_creator
    test_only = cfg.mode == "ablation2"
    # during warm-up the architecture and the creator stay put
    warm = state.epoch < cfg.warmup_epochs
    creator_active = creator_active and not warm
    metrics = dict.fromkeys(METRIC_COLUMNS, float("nan"))
    metrics.update(step=state.step, epoch=state.epoch)

    # 1. architecture
    f = current_weights(state, bank)
    metrics["card_sigma"] = float(np.sum(f))
    metrics["mean_f_clean"] = _mean_or_nan(f[~bank.corrupted])
    metrics["mean_f_corrupted"] = _mean_or_nan(f[bank.corrupted])
    info = {}
    if not warm:
        try:
            g_arch = hg.arch_hypergradient(net, L.A, L.W, f, bank, ln, cfg.unroll, info)
            L.A = L.a_opt.step(L.A, g_arch, cfg.optim.arch.lr_at(ep, total))
            metrics["norm_test_loss"] = info["loss"]
        except DegenerateTest as exc:
            log.warning("step %d: architecture update skipped (%s)", state.step, exc)
    if phase_hook:
        phase_hook("arch", state)

    # 2. creator (or selection scalars)
    if creator_active:
        W1 = hg.learner_unroll(net, L.A, L.W, ln, cfg.unroll.xi_ln)
        if cfg.mode == "ablation1":
            losses = per_example_loss(net, L.A, W1, bank).value
            pos = [state.bank_positions[int(i)] for i in bank.ids]
            try:
                value, g = hg.ablation1_difficulty_grad(T.s, pos, losses)
                T.s = T.c_opt.step(T.s, -g, cfg.optim.creator.lr_at(ep, total))
            except DegenerateTest as exc:
                log.warning("step %d: selection update skipped (%s)", state.step, exc)
        else:
            E1, X1 = hg.tester_unroll(tnet, T.E, T.X, T.C, tt, bank, cfg.gamma, cfg.unroll, test_only)
            cinfo = {}
            g_val = hg.creator_grad_val(tnet, T.E, T.X, T.C, E1, X1, bank, val, cfg.gamma, cfg.unroll, cinfo)
            metrics["val_loss"] = cinfo["val_loss"]
            try:
                g_diff = hg.creator_grad_difficulty(net, L.A, W1, tnet, T.E, T.X, T.C, E1, bank, cfg.gamma, cfg.unroll)
            except DegenerateTest as exc:
                log.warning("step %d: difficulty term skipped (%s)", state.step, exc)
                g_diff = None
            ascent = hg.creator_total_grad(g_diff, g_val, cfg.lam)
            T.C = T.c_opt.step(T.C, -ascent, cfg.optim.creator.lr_at(ep, total))
    if phase_hook:
        phase_hook("creator", state)

    # 3. encoder and executor
    if tester_active:
        loss, g = ad.value_and_grad(stage2_fn(tnet, cfg.gamma, test_only), T.blocks(), (tt, bank), ("E", "X"))
        lr = cfg.optim.encoder_executor.lr_at(ep, total)
        T.E = T.e_opt.step(T.E, g["E"], lr)
        T.X = T.x_opt.step(T.X, g["X"], lr)
        metrics["stage2_loss"] = loss
    if phase_hook:
        phase_hook("tester", state)

    # 4. weights
    weights_step(L, ln, cfg.optim.weights.lr_at(ep, total))
    metrics["train_loss"] = L.last_train_loss
    if phase_hook:
        phase_hook("weights", state)

    state.step += 1
    state.last_metrics = metrics
    return state


# ---------------------------------------------------------------- data


def load_data(config: LptConfig):
    """``(splits, held_out_test)`` for a config."""
    d = config.data
    if d.source == "file":
        full = read_lptd(d.path, d.image_shape)
        test = read_lptd(d.test_path, d.image_shape) if d.test_path else None
    else:
        corrupt = d.corrupt_frac if d.corrupt_scope == "all" else 0.0
        full = synth_two_class(d.n, d.noise, corrupt, d.seed, d.shape)
        test = synth_two_class(d.test_n, d.noise, 0.0, d.seed + 1_000_003, d.shape)
        # keep test ids distinct from training ids
        test = Dataset(test.ids + d.n, test.inputs, test.labels, test.num_classes)
    split = SplitSpec(tuple(d.split.fractions), d.split.seed, d.split.alias_bank_val)
    splits = make_splits(full, split)
    if d.corrupt_scope == "bank" and d.corrupt_frac > 0:
        bank = corrupt_labels(splits.bank, d.corrupt_frac, d.seed + 17)
        splits = Splits(splits.ln_tr, splits.tt_tr, bank if splits.aliased else splits.tt_val, bank)
    return splits, test


# ---------------------------------------------------------------- search


@dataclass
class SearchResult:
    genotype: Genotype
    history: list
    state: LptState
    selection: list = field(default_factory=list)  # (step, id, f, corrupted) rows


def bank_selection(state: LptState, bank: Dataset) -> np.ndarray:
    return current_weights(state, bank)


class _CsvSink:
    def __init__(self, path, header):
        self.fh = open(path, "w", newline="") if path else None
        self.writer = csv.writer(self.fh) if self.fh else None
        if self.writer:
            self.writer.writerow(header)
            self.fh.flush()

    def row(self, values):
        if self.writer:
            self.writer.writerow(values)
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def steps_per_epoch(config: LptConfig, splits: Splits) -> int:
    return math.ceil(len(splits.ln_tr) / config.batch_size)


def run_search(config: LptConfig, splits: Splits, out_dir=None, on_step=None, phase_hook=None) -> SearchResult:
    """``epochs x steps_per_epoch`` LPT steps, then discretize the architecture.

    With ``out_dir`` the metrics and selection-weight CSVs are flushed as the
    run progresses and ``genotype.json`` is written at the end.
    """
    config.validate()
    state = init_state(config, splits)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    metrics_sink = _CsvSink(out / "metrics.csv" if out else None, METRIC_COLUMNS)
    sel_sink = _CsvSink(out / "selection_weights.csv" if out else None, ("step", "example_id", "f", "corrupted"))
    bank_bs = config.bank_batch_size or config.batch_size
    streams = {
        "tt_tr": BatchStream(splits.tt_tr, config.batch_size, state.seeds["tt_tr"]),
        "tt_val": BatchStream(splits.tt_val, config.batch_size, state.seeds["tt_val"]),
        "bank": BatchStream(splits.bank, bank_bs, state.seeds["bank"]),
    }
    history, selection = [], []
    try:
        for epoch in range(config.epochs):
            state.epoch = epoch
            for ln_batch in batch_iterator(splits.ln_tr, config.batch_size, state.seeds["ln_tr"], epoch):
                batches = {"ln_tr": ln_batch, **{k: s.next() for k, s in streams.items()}}
                lpt_step(state, batches, phase_hook)
                history.append(state.last_metrics)
                metrics_sink.row([_fmt(state.last_metrics[c]) for c in METRIC_COLUMNS])
                if on_step:
                    on_step(state)
            f = bank_selection(state, splits.bank)
            for i, fv, c in zip(splits.bank.ids, f, splits.bank.corrupted):
                row = (state.step, int(i), float(fv), int(bool(c)))
                selection.append(row)
                sel_sink.row(row)
    finally:
        metrics_sink.close()
        sel_sink.close()
    genotype = discretize(state.learner.net.spec, state.learner.A)
    if out:
        (out / "genotype.json").write_text(genotype.to_json() + "\n")
    return SearchResult(genotype, history, state, selection)


# ---------------------------------------------------------------- evaluation


def error_rate(net, W, data: Dataset) -> float:
    logits = net.logits(W, data.inputs).value
    return float(np.mean(np.argmax(logits, axis=1) != data.labels))


def eval_train_data(splits: Splits) -> Dataset:
    """Everything the search saw: learner/tester training data plus validation/bank data."""
    out = splits.ln_tr
    for ds in (splits.tt_tr, splits.tt_val, splits.bank):
        out = out.concat(ds)
    return out


def run_eval(genotype: Genotype, config: LptConfig, train_data: Dataset, test_data: Dataset,
             seed=None, spec=None, on_train_end=None, history=None) -> float:
    """Train the discrete network from scratch on ``train_data``; return its error on ``test_data``."""
    ev = config.eval
    seed = config.seed if seed is None else seed
    spec = spec or config.cell.spec(num_cells=ev.num_cells, width=ev.width)
    dtype = ad.resolve_dtype(config.precision)
    net = FixedNetwork(genotype, spec, train_data.dim, train_data.num_classes, train_data.image_shape)
    s_w, s_b = _seeds(seed, 3)[1:]
    W = ParamVector(net.init_weights(np.random.default_rng(s_w), dtype))
    opt = SGD(ev.lr, ev.momentum, ev.weight_decay)
    fn = ad.DifferentiableFn(("W",), lambda p, b: ad.mean(ad.cross_entropy(net.logits(p["W"], b.inputs), b.labels)))
    for epoch in range(ev.epochs):
        lr = 0.5 * ev.lr * (1 + math.cos(math.pi * epoch / ev.epochs))
        for batch in batch_iterator(train_data, ev.batch_size, s_b, epoch):
            loss, g = ad.value_and_grad(fn, {"W": W}, batch, ("W",))
            W = opt.step(W, g["W"], lr)
            if history is not None:
                history.append(loss)
    if on_train_end:
        on_train_end()
    return error_rate(net, W, test_data)
