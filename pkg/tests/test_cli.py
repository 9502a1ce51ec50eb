import json
import math

import numpy as np
import pytest

from needleroll.cli import main
from needleroll.config import (
    RunConfig,
    load_config_file,
    resolve_config,
    write_resolved_config,
)


# ------------------------------------------------------------- configuration

def test_resolve_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"seed": 5, "medium": "brain", "n": 9}))
    config = resolve_config(load_config_file(cfg_file),
                            {"medium": "lung", "seed": None})
    assert config.seed == 5  # file wins over unset flag
    assert config.medium == "lung"  # explicit flag wins over file
    assert config.n == 9
    assert config.jobs == 1  # untouched default


def test_config_file_rejects_unknown_keys(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"sneed": 5}))
    with pytest.raises(ValueError):
        load_config_file(cfg_file)


def test_config_file_rejects_bad_json(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text("{nope")
    with pytest.raises(ValueError):
        load_config_file(cfg_file)


def test_config_validation():
    with pytest.raises(ValueError):
        resolve_config({}, {"medium": "granite"})
    with pytest.raises(ValueError):
        resolve_config({}, {"estimators": ("lstm", "psychic")})
    with pytest.raises(ValueError):
        resolve_config({}, {"jobs": 0})
    with pytest.raises(ValueError):
        resolve_config({}, {"train_fraction": 1.5})
    with pytest.raises(ValueError):
        resolve_config({}, {"target": (1.0, 2.0)})


def test_config_builds_components():
    config = resolve_config({}, {"medium": "lung", "rigid": True,
                                 "rate": 50.0})
    medium = config.make_medium()
    assert medium.name == "lung" and medium.rigid
    assert config.make_controller().rate == 50.0
    assert config.make_workspace().depth_max == 75.0
    tc = config.make_train_config()
    assert tc.hidden_size == 30 and tc.z_max == 75.0


def test_resolved_config_roundtrip(tmp_path):
    config = resolve_config({}, {"seed": 9, "estimators": ("truth", "ekf")})
    write_resolved_config(config, tmp_path)
    doc = json.loads((tmp_path / "config.json").read_text())
    assert doc["schema_version"] == 1
    again = resolve_config({k: v for k, v in doc.items()
                            if k != "schema_version"}, {})
    assert again == config


# --------------------------------------------------------------- CLI surface

def test_cli_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0


def test_cli_unknown_flag_is_usage_error(capsys):
    assert main(["generate", "--frobnicate"]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_unknown_subcommand_is_usage_error():
    assert main(["transmogrify"]) == 1


def test_cli_missing_out_is_usage_error(capsys):
    assert main(["generate", "--n", "1"]) == 1
    assert "--out" in capsys.readouterr().err


def test_cli_generate_and_retrain_roundtrip(tmp_path, capsys):
    ds = tmp_path / "ds"
    code = main(["generate", "--n", "4", "--seed", "3", "--out", str(ds)])
    assert code == 0
    out = capsys.readouterr().out
    assert "train 3 / val 1" in out
    assert (ds / "episodes.jsonl").exists()
    assert (ds / "manifest.json").exists()
    assert (ds / "config.json").exists()

    run = tmp_path / "run"
    code = main(["train", "--dataset", str(ds), "--out", str(run),
                 "--epochs", "2", "--hidden-size", "4", "--seed", "1"])
    assert code == 0
    out = capsys.readouterr().out
    assert (run / "model.json").exists()
    assert (run / "training_log.csv").exists()
    log_rows = (run / "training_log.csv").read_text().strip().splitlines()
    assert len(log_rows) == 3  # header + 2 epochs
    last_val = float(log_rows[-1].split(",")[2])
    assert f"{last_val:.4f}" in out  # printed RMSE matches the log


def test_cli_generate_deterministic_across_jobs(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert main(["generate", "--n", "3", "--seed", "5", "--out", str(a)]) == 0
    assert main(["generate", "--n", "3", "--seed", "5", "--out", str(b),
                 "--jobs", "2"]) == 0
    assert (a / "episodes.jsonl").read_bytes() == \
        (b / "episodes.jsonl").read_bytes()
    assert (a / "manifest.json").read_bytes() == \
        (b / "manifest.json").read_bytes()


def test_cli_generate_stall_is_runtime_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"depth_cap": 20.0}))
    code = main(["generate", "--config", str(cfg), "--n", "1",
                 "--out", str(tmp_path / "ds")])
    assert code == 2
    assert "failed" in capsys.readouterr().err


def test_cli_steer_truth(tmp_path, capsys):
    out = tmp_path / "steer"
    code = main(["steer", "--estimator", "truth", "--seed", "2",
                 "--out", str(out)])
    assert code == 0
    text = capsys.readouterr().out
    assert "arrived" in text
    assert (out / "report.txt").exists()
    assert (out / "config.json").exists()


def test_cli_steer_ekf_rigid_lands_under_a_millimetre(tmp_path, capsys):
    out = tmp_path / "steer"
    code = main(["steer", "--estimator", "ekf", "--rigid", "--seed", "4",
                 "--target", "3,4,60", "--out", str(out)])
    assert code == 0
    text = capsys.readouterr().out
    err = float(text.split("targeting error ")[1].split(" mm")[0])
    assert err < 1.0


def test_cli_steer_lstm_requires_model(tmp_path, capsys):
    assert main(["steer", "--estimator", "lstm",
                 "--out", str(tmp_path / "x")]) == 1
    assert "--model" in capsys.readouterr().err


def test_cli_evaluate_and_report_idempotent(tmp_path, capsys):
    out = tmp_path / "eval"
    code = main(["evaluate", "--estimators", "truth,ekf", "--rigid",
                 "--n", "2", "--seed", "6", "--out", str(out)])
    assert code == 0
    report_a = (out / "report.txt").read_bytes()
    hist_a = (out / "histogram.csv").read_bytes()
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "report.txt").read_bytes() == report_a
    assert (out / "histogram.csv").read_bytes() == hist_a


def test_cli_evaluate_config_file_merge(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 1, "rigid": True,
                               "estimators": ["ekf"]}))
    out = tmp_path / "eval"
    code = main(["evaluate", "--config", str(cfg), "--medium", "brain",
                 "--seed", "8", "--out", str(out)])
    assert code == 0
    doc = json.loads((out / "config.json").read_text())
    assert doc["medium"] == "brain"  # flag override
    assert doc["n"] == 1 and doc["rigid"] is True  # from file
    assert "[brain / ekf]" in (out / "report.txt").read_text()
