import json

import pytest

from lpt.config import SCHEMA, LptConfig, load_config
from lpt.errors import ConfigError


def _write(tmp_path, doc):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    return path


def test_defaults_roundtrip(tmp_path):
    cfg = LptConfig()
    assert cfg.lam == 1.0 and cfg.gamma == 1.0 and cfg.epochs == 50 and cfg.batch_size == 64
    back = load_config(_write(tmp_path, cfg.to_dict()))
    assert back == cfg


def test_nested_overrides(tmp_path):
    cfg = load_config(_write(tmp_path, {
        "schema": SCHEMA, "lambda": 0.5, "mode": "ablation2",
        "cell": {"num_nodes": 4, "ops": ["zero", "identity", "linear"]},
        "optim": {"arch": {"kind": "adam", "lr": 0.01}},
        "unroll": {"first_order": True},
    }))
    assert cfg.lam == 0.5 and cfg.cell.ops == ("zero", "identity", "linear")
    assert cfg.optim.arch.lr == 0.01 and cfg.unroll.first_order
    assert cfg.optim.weights.kind == "sgd"


@pytest.mark.parametrize("doc, key", [
    ({"schema": SCHEMA, "lamda": 1}, "lamda"),
    ({"schema": SCHEMA, "data": {"noize": 0.1}}, "data.noize"),
    ({"schema": SCHEMA, "optim": {"arch": {"learning_rate": 1}}}, "optim.arch.learning_rate"),
])
def test_unknown_keys_name_the_offender(tmp_path, doc, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        load_config(_write(tmp_path, doc))


@pytest.mark.parametrize("doc", [
    {},
    {"schema": "lpt-config/0"},
    {"schema": SCHEMA, "lambda": -1},
    {"schema": SCHEMA, "gamma": -0.5},
    {"schema": SCHEMA, "epochs": 0},
    {"schema": SCHEMA, "mode": "fancy"},
    {"schema": SCHEMA, "precision": "float16"},
    {"schema": SCHEMA, "cell": {"ops": ["identity", "linear"]}},
    {"schema": SCHEMA, "unroll": {"xi_ln": -1}},
    {"schema": SCHEMA, "data": 3},
    {"schema": SCHEMA, "warmup_epochs": 50},
    {"schema": SCHEMA, "selection_override": 0.0},
])
def test_invalid_documents(tmp_path, doc):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, doc))


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
