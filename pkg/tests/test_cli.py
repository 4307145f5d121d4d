import csv
import json

import pytest

from lpt import cli
from lpt.config import LptConfig


@pytest.fixture
def config_path(tmp_path):
    cfg = LptConfig(precision="float64", epochs=1, batch_size=16)
    cfg.cell.num_nodes = 4
    cfg.cell.width = 4
    cfg.data.n = 64
    cfg.data.test_n = 50
    cfg.eval.epochs = 2
    path = tmp_path / "config.json"
    path.write_text(cfg.to_json())
    return path


def test_search_writes_artifacts_and_manifest(tmp_path, config_path):
    out = tmp_path / "run"
    assert cli.main(["search", "--config", str(config_path), "--seed", "5", "--out", str(out)]) == 0
    for name in ("genotype.json", "metrics.csv", "selection_weights.csv", "manifest.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["config"]["seed"] == 5
    assert manifest["status"] == "ok" and manifest["finished"]
    assert set(manifest["outputs"]) == {"genotype.json", "metrics.csv", "selection_weights.csv"}


def test_manifest_reproduces_run(tmp_path, config_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["search", "--config", str(config_path), "--out", str(a)]) == 0
    echo = tmp_path / "echo.json"
    echo.write_text(json.dumps(json.loads((a / "manifest.json").read_text())["config"]))
    assert cli.main(["search", "--config", str(echo), "--out", str(b)]) == 0
    assert (a / "metrics.csv").read_text() == (b / "metrics.csv").read_text()


def test_eval_writes_metrics(tmp_path, config_path):
    run = tmp_path / "run"
    cli.main(["search", "--config", str(config_path), "--out", str(run)])
    out = tmp_path / "eval"
    assert cli.main(["eval", "--config", str(config_path), "--genotype", str(run / "genotype.json"),
                     "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "eval_metrics.csv")))
    assert 0.0 <= float(rows[0]["test_error"]) <= 1.0


def test_eval_missing_genotype(tmp_path, config_path):
    assert cli.main(["eval", "--config", str(config_path), "--genotype", str(tmp_path / "none.json"),
                     "--out", str(tmp_path / "e")]) == 2


def test_sweep_rows(tmp_path, config_path):
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(config_path), "--param", "lambda", "--values", "0.1,0.5,1,2",
                     "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "sweep.csv")))
    assert rows[0] == ["lambda", "error"] and len(rows) == 5
    assert [float(r[0]) for r in rows[1:]] == [0.1, 0.5, 1.0, 2.0]


def test_oracle_suite_passes(tmp_path):
    out = tmp_path / "oracle"
    assert cli.main(["oracle", "--suite", "bilevel", "--out", str(out)]) == 0
    report = json.loads((out / "oracle_report.json").read_text())
    assert report and all(set(r) == {"name", "max_rel_err", "tolerance", "pass"} for r in report)


def test_oracle_failure_exit_code(tmp_path, monkeypatch):
    from lpt import oracle

    def broken(report):
        report.add("broken", 1.0, 1e-6)
        return report

    monkeypatch.setitem(oracle.SUITES, "bilevel", broken)
    assert cli.main(["oracle", "--suite", "bilevel", "--out", str(tmp_path)]) == 3


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema": "lpt-config/1", "lamda": 1}))
    assert cli.main(["search", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "lamda" in capsys.readouterr().err
    assert cli.main(["search", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2


def test_run_failure_exit_1_keeps_partial_outputs(tmp_path, config_path, monkeypatch):
    from lpt import engine
    from lpt.errors import NonFiniteLoss

    def boom(*a, **k):
        raise NonFiniteLoss("diverged")

    monkeypatch.setattr(engine, "run_search", boom)
    out = tmp_path / "fail"
    assert cli.main(["search", "--config", str(config_path), "--out", str(out)]) == 1
    assert json.loads((out / "manifest.json").read_text())["status"] == "failed"
