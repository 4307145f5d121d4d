"""Command-line entry point: ``lpt search|eval|oracle|sweep``.

Exit codes: 0 success, 1 run failure, 2 config error, 3 oracle failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

from lpt import __version__
from lpt.config import LptConfig, load_config
from lpt.errors import ConfigError, LptError

log = logging.getLogger("lpt")

EXIT_OK, EXIT_RUN, EXIT_CONFIG, EXIT_ORACLE = 0, 1, 2, 3


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class RunManifest:
    """``manifest.json``: written when a run starts, finalized when it ends."""

    def __init__(self, out: Path, command: str, config: LptConfig | None, seed):
        from lpt import kernels

        self.path = out / "manifest.json"
        self.data = {
            "command": command,
            "build": build_id(),
            "kernel_backend": kernels.BACKEND,
            "seed": seed,
            "config": config.to_dict() if config else None,
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": [],
        }
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.data, indent=2) + "\n")

    def finalize(self, status: str, outputs):
        self.data.update(finished=_now(), status=status, outputs=sorted(str(o) for o in outputs))
        self._write()


def _load(args) -> LptConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    return config


def _outputs(out: Path):
    return [p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json"]


def _run(out: Path, command: str, config, seed, body) -> int:
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out, command, config, seed)
    try:
        code = body()
    except (LptError, ArithmeticError, ValueError, OSError) as exc:
        log.error("%s failed: %s", command, exc)
        manifest.finalize("failed", _outputs(out))
        return EXIT_RUN
    manifest.finalize("ok" if code == EXIT_OK else "failed", _outputs(out))
    return code


def cmd_search(args) -> int:
    from lpt import engine

    config = _load(args)
    out = Path(args.out)

    def body():
        splits, _ = engine.load_data(config)
        result = engine.run_search(config, splits, out)
        log.info("genotype: %s", json.dumps(result.genotype.to_dict()))
        return EXIT_OK

    return _run(out, "search", config, config.seed, body)


def cmd_eval(args) -> int:
    from lpt import engine
    from lpt.search_space import Genotype

    config = _load(args)
    out = Path(args.out)
    try:
        genotype = Genotype.from_json(Path(args.genotype).read_text())
    except FileNotFoundError:
        log.error("genotype file not found: %s", args.genotype)
        return EXIT_CONFIG

    def body():
        splits, test = engine.load_data(config)
        if test is None:
            raise ConfigError("data.test_path: eval needs a held-out test set")
        spec = config.cell.spec(num_cells=config.eval.num_cells, width=config.eval.width)
        genotype.check(spec)
        losses = []
        error = engine.run_eval(genotype, config, engine.eval_train_data(splits), test, history=losses)
        with open(out / "eval_metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("seed", "epochs", "final_train_loss", "test_error"))
            w.writerow((config.seed, config.eval.epochs, repr(losses[-1]) if losses else "nan", repr(error)))
        log.info("test error: %.4f", error)
        return EXIT_OK

    return _run(out, "eval", config, config.seed, body)


def cmd_oracle(args) -> int:
    from lpt import oracle

    out = Path(args.out)
    config = _load(args) if args.config else None

    def body():
        report = oracle.run_suite(args.suite)
        report.write(out / "oracle_report.json")
        for c in report.checks:
            log.info("%-52s %.3e <= %.1e  %s", c.name, c.max_rel_err, c.tolerance, "pass" if c.passed else "FAIL")
        return EXIT_OK if report.passed else EXIT_ORACLE

    return _run(out, "oracle", config, config.seed if config else None, body)


def sweep_errors(config: LptConfig, param: str, values, out: Path | None = None) -> list:
    """Search then evaluate once per value; returns ``[(value, error), ...]``."""
    from lpt import engine

    key = {"lambda": "lam", "gamma": "gamma"}[param]
    splits, test = engine.load_data(config)
    train = engine.eval_train_data(splits)
    rows = []
    for v in values:
        point = config.with_overrides(**{key: float(v)})
        sub = out / f"{param}={v:g}" if out else None
        result = engine.run_search(point, splits, sub)
        rows.append((float(v), engine.run_eval(result.genotype, point, train, test)))
    return rows


def cmd_sweep(args) -> int:
    config = _load(args)
    out = Path(args.out)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        log.error("--values: expected a comma-separated list of numbers, got %r", args.values)
        return EXIT_CONFIG
    if not values or min(values) < 0:
        log.error("--values: need at least one non-negative value")
        return EXIT_CONFIG

    def body():
        rows = sweep_errors(config, args.param, values, out)
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow((args.param, "error"))
            for v, e in rows:
                w.writerow((repr(v), repr(e)))
        return EXIT_OK

    return _run(out, "sweep", config, config.seed, body)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpt", description="Architecture search by passing tests.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default="runs/latest", help="output directory")

    p = sub.add_parser("search", help="run the search and write the selected genotype")
    common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="train a genotype from scratch and report held-out error")
    common(p)
    p.add_argument("--genotype", required=True, help="genotype.json from a search run")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="check gradients against brute-force references")
    common(p, config_required=False)
    p.add_argument("--suite", default="all", choices=("all", "autodiff", "hypergrad", "creator", "bilevel"))
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sweep", help="final error across values of lambda or gamma")
    common(p)
    p.add_argument("--param", required=True, choices=("lambda", "gamma"))
    p.add_argument("--values", default="0.1,0.5,1,2,3", help="comma-separated grid")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"lpt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
