import json
from pathlib import Path

import pytest

from securebayes.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_OK, main

SHALLOW = str(Path(__file__).parent / "data" / "shallow.json")


def test_runs_all_settings_and_writes_outputs(tmp_path, capsys):
    rc = main(["--model", "density", "--setting", "all", "--repeats", "1", "--max-steps", "10",
               "--out", str(tmp_path)])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    assert "dp-he-distributed minus dp-central" in out
    names = {p.name for p in tmp_path.iterdir()}
    assert {"epsilon_sweep_density.csv", "timing_density.csv", "summary.json"} <= names


def test_config_file_with_overrides(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": "survival", "settings": ["plain"], "repeats": 1,
                               "privacy": {"epsilon": [1.0], "T": 1}}))
    assert main(["--config", str(cfg), "--max-steps", "5", "--epsilon", "0.1", "--epsilon", "1"]) == EXIT_OK


@pytest.mark.parametrize("argv", [
    ["--model", "density", "--epsilon", "-1"],
    ["--model", "density", "--config", "/nonexistent.json"],
    ["--model", "density", "--strict-privacy", "--epsilon", "100", "--iters", "1", "--repeats", "1"],
    ["--model", "logistic", "--data", "/nonexistent.csv", "--repeats", "1"],
    ["--model", "density", "--setting", "dp-he-distributed", "--gamma"],
])
def test_config_errors_exit_2(argv):
    assert main(argv) == EXIT_CONFIG


def test_protocol_abort_exits_3():
    rc = main(["--model", "density", "--setting", "dp-he-distributed", "--repeats", "1", "--max-steps", "2",
               "--preset", SHALLOW])
    assert rc == EXIT_ABORT


def test_export_data(tmp_path):
    path = tmp_path / "surv.csv"
    assert main(["--model", "survival", "--export-data", str(path)]) == EXIT_OK
    header = path.read_text().splitlines()[0].split(",")
    assert header[-2:] == ["time", "event"] and len(header) == 9
    assert main(["--model", "survival", "--data", str(path), "--setting", "plain", "--repeats", "1",
                 "--max-steps", "5"]) == EXIT_OK
