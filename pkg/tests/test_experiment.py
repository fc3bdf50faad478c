import csv
import json
import time
from pathlib import Path

import numpy as np
import pytest

from gradshield import cli
from gradshield.data import gen_data, save_dataset
from gradshield.experiment import ConfigError, ExperimentConfig, load_config, parse_config, run_experiment

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults_and_shipped_configs_agree():
    cfg = load_config(CONFIGS / "default.toml")
    base = ExperimentConfig()
    for part in ("data", "vit", "cnn", "train", "attack"):
        assert getattr(cfg, part) == getattr(base, part)
    assert cfg.fl is not None and cfg.fl.shield == "ensemble"
    assert load_config(CONFIGS / "smoke.toml").attack.repeats == 2


def test_unknown_field_reports_line():
    with pytest.raises(ConfigError, match=r":3 \[train.lrate\]"):
        parse_config("seed = 1\n[train]\nlrate = 0.1\n")


def test_wrong_type_reports_field():
    with pytest.raises(ConfigError, match=r"\[attack.steps\].*expected int"):
        parse_config("[attack]\nsteps = 'ten'\n")


def test_syntax_error_reports_line():
    with pytest.raises(ConfigError, match=r":2"):
        parse_config("seed = 0\n[data\n")


def test_inconsistent_sections_rejected():
    with pytest.raises(ConfigError, match=r"vit.image"):
        parse_config("[data]\nimage = 8\n[vit]\nimage = 16\n")
    with pytest.raises(ConfigError, match="shield setting"):
        parse_config("[attack]\nsettings = ['bit']\n")


def test_missing_dataset_path_rejected(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[data]\npath = 'nowhere'\n")
    with pytest.raises(ConfigError, match="missing dataset"):
        load_config(p)


def test_external_dataset_import(tmp_path):
    save_dataset(gen_data(4, 2, 16, 1), tmp_path / "ext" / "train")
    save_dataset(gen_data(4, 1, 16, 2), tmp_path / "ext" / "test")
    p = tmp_path / "c.toml"
    p.write_text("[data]\npath = 'ext'\n")
    from gradshield.experiment import make_datasets
    train, test = make_datasets(load_config(p))
    assert (len(train), len(test)) == (8, 4)


def test_smoke_run_layout_and_timing(tmp_path):
    start = time.perf_counter()
    paths = run_experiment(CONFIGS / "smoke.toml", tmp_path)
    assert time.perf_counter() - start < 300
    rows = list(csv.reader(paths["csv"].open()))
    assert len(rows) == 4 and all(len(r) == 7 for r in rows)
    assert [r[0] for r in rows[1:]] == ["ViT", "CNN", "Ensemble"]
    cells = [float(c) for r in rows[1:] for c in r[1:]]
    assert all(0 <= c <= 1 for c in cells)
    training = json.loads((tmp_path / "training.json").read_text())
    table = json.loads(paths["json"].read_text())["table"]
    assert table["ViT"]["Clean"] == round(training["clean_accuracy"]["vit"], 6)
    assert table["CNN"]["Clean"] == round(training["clean_accuracy"]["cnn"], 6)
    assert "fl" not in paths


def test_cli_shield_report_and_gen_data(tmp_path, capsys):
    assert cli.main(["shield-report", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "shield_memory.json").read_text())
    assert 8e6 <= rep["vit_l16"]["total_bytes"] <= 17e6
    assert cli.main(["gen-data", "--config", str(CONFIGS / "smoke.toml"), "--seed", "3", "--out",
                     str(tmp_path)]) == 0
    assert (tmp_path / "train" / "images.pelt").is_file()
    assert "vit_l16" in capsys.readouterr().out


def test_cli_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[attack]\nsteps = -\n")
    assert cli.main(["attack", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "bad.toml:2" in capsys.readouterr().err


def test_cli_fl_run(tmp_path):
    p = tmp_path / "fl.toml"
    p.write_text("[data]\ntrain_per_class = 16\ntest_per_class = 4\n[fl]\nclients = 2\nrounds = 1\n"
                 "local_epochs = 1\nprobe_samples = 8\n")
    assert cli.main(["fl-run", "--config", str(p), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "fl_rounds.jsonl").read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["replication_rate"] is not None
