import json
import shutil

import pytest

from backdoor_mesa.cli import main
from backdoor_mesa.config import RunConfig

TINY = {
    "data": {"n_train": 300, "n_test": 200},
    "victim": {"epochs": 5},
    "attack": {"epochs": 4, "triggers": ["dot", "color0"]},
    "modeling": {"thresholds": [0.3, 0.6], "mix": [1, 1], "epochs": 8, "noise_dim": 8, "gen_hidden": 16,
                 "stats_hidden": 16, "eval_samples": 64, "mi_batch": 64, "mi_eval_batches": 1},
    "detect": {"epochs": 2},
    "defense": {"epochs": 1, "seeds": [0]},
    "baseline": {"runs": 2, "epochs": 1},
    "oracle": {"seeds": 1, "levels": 2, "epochs": 10, "samples": 2000, "cells": 16},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def run(args, out):
    return main(args + ["--out", str(out)])


def test_missing_prerequisite(tmp_path, tiny_config, capsys):
    assert run(["train-victim", "--config", str(tiny_config)], tmp_path / "o") == 2
    assert "run `gen-data` first" in capsys.readouterr().err


def test_report_on_empty_dir(tmp_path, tiny_config, capsys):
    assert run(["report", "--config", str(tiny_config)], tmp_path / "o") == 2
    assert "nothing to report" in capsys.readouterr().err


def test_bad_override_and_unknown_trigger(tmp_path, tiny_config, capsys):
    assert run(["gen-data", "--config", str(tiny_config), "--set", "data.bogus=1"], tmp_path / "o") == 2
    assert run(["gen-data", "--config", str(tiny_config)], tmp_path / "o") == 0
    assert run(["attack", "--config", str(tiny_config), "--trigger", "nope"], tmp_path / "o") == 2


def test_artifact_from_other_config_rejected(tmp_path, tiny_config, capsys):
    out = tmp_path / "o"
    assert run(["gen-data", "--config", str(tiny_config)], out) == 0
    a = RunConfig.load(tiny_config).hash()
    b = RunConfig.load(tiny_config).override({"seed": 5}).hash()
    (out / b).mkdir(parents=True)
    shutil.copy(out / a / "data.bin", out / b / "data.bin")
    assert run(["train-victim", "--config", str(tiny_config), "--seed", "5"], out) == 2
    assert "produced by config" in capsys.readouterr().err


def test_stage_chain_and_oracle(tmp_path, tiny_config):
    out = tmp_path / "o"
    cfg = ["--config", str(tiny_config)]
    for cmd in ("gen-data", "train-victim", "attack", "detect", "oracle"):
        assert run([cmd] + cfg, out) == 0
    d = out / RunConfig.load(tiny_config).hash()
    for rel in ("data.bin", "catalog.json", "victim.ckpt", "attack/dot.ckpt", "attack.csv", "detect.csv",
                "oracle.csv", "oracle/levels_seed0.csv"):
        assert (d / rel).exists(), rel


def test_sweep_is_byte_identical(tmp_path, tiny_config):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert run(["sweep", "--config", str(tiny_config)], out) == 0
    h = RunConfig.load(tiny_config).hash()
    csvs = sorted(p.relative_to(outs[0] / h) for p in (outs[0] / h).rglob("*.csv"))
    assert {str(p) for p in csvs} >= {"defense.csv", "ideal.csv", "baseline.csv", "summary.csv", "attack.csv"}
    for rel in csvs:
        assert (outs[0] / h / rel).read_bytes() == (outs[1] / h / rel).read_bytes(), rel
    assert (outs[0] / h / "asr_bars.svg").exists()
