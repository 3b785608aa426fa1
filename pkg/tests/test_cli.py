import json
import subprocess
import sys

import pytest

from flguard.cli import EXIT_CONFIG, EXIT_USAGE, main

SMALL = """n_clients = 20
n_malicious = 4
per_round = 5
rounds = 3
train_per_class = 40
test_per_class = 20
aux_size = 10
attack = "backdoor"
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(SMALL)
    return p


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def test_run(cfg, tmp_path, capsys):
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["rounds"] == 3 and (tmp_path / "o" / "report.jsonl").exists()
    assert "seed = 3" in (tmp_path / "o" / "config.toml").read_text()


def test_bad_config_names_key(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("poison_rate = 1.5\n")
    assert main(["run", "--config", str(p)]) == EXIT_CONFIG
    err = last_error(capsys)
    assert err["error"] == "config" and err["key"] == "poison_rate"


def test_missing_file(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "none.toml")]) == EXIT_CONFIG
    assert last_error(capsys)["error"] == "io"


@pytest.mark.parametrize("argv", [[], ["fly"], ["run"], ["sweep", "--config", "x", "--axis", "width", "--values", "1"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert last_error(capsys)["error"] == "usage"


def test_bad_sweep_values(cfg, capsys):
    assert main(["sweep", "--config", str(cfg), "--axis", "poison_rate", "--values", "0.1,abc"]) == EXIT_USAGE


def test_sweep_and_report(cfg, tmp_path, capsys):
    assert main(["sweep", "--config", str(cfg), "--axis", "poison_rate", "--values", "0,0.5",
                 "--out", str(tmp_path / "s")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert len(table) == 3
    assert main(["report", "--in", str(tmp_path / "s"), "--out", str(tmp_path / "r")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3
    assert (tmp_path / "r" / "summary.tsv").exists() and (tmp_path / "r" / "curves.tsv").exists()


def test_report_empty_dir(tmp_path, capsys):
    assert main(["report", "--in", str(tmp_path), "--out", str(tmp_path / "r")]) != 0
    assert last_error(capsys)["error"] == "io"


def test_selftest(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 8 and all(line.startswith("PASS") for line in lines)


def test_module_entry_point(tmp_path):
    done = subprocess.run([sys.executable, "-m", "flguard", "bogus"], capture_output=True, text=True)
    assert done.returncode == EXIT_USAGE
    assert json.loads(done.stderr.strip().splitlines()[-1])["error"] == "usage"
