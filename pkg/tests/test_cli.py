import json
import subprocess
import sys

import pytest

from omm.cli import main


def write_cfg(tmp_path, policies="greedy-uniform", extra=""):
    p = tmp_path / "exp.ini"
    p.write_text(f"[space]\nkind = euclidean\nd = 2\n[distribution]\nname = uniform\n[policies]\nkeys = {policies}\n"
                 f"[experiment]\nn_grid = 4, 8, 16, 32\ntrials = 3\nseed = 7\nadversary = grid\n"
                 f"csv = out.csv\nsummary = out.json\n{extra}")
    return p


def test_run_ok(tmp_path, capsys):
    assert main(["run", str(write_cfg(tmp_path))]) == 0
    assert (tmp_path / "out.csv").read_text().startswith("policy,n,m,trial,cost,opt,ratio,regret\n")
    assert json.loads((tmp_path / "out.json").read_text())["schema"] == 1


def test_run_embed_flag(tmp_path):
    cfg = write_cfg(tmp_path, "mnp-hst")
    assert main(["run", str(cfg)]) == 3
    assert main(["run", str(cfg), "--embed", "hst"]) == 0


def test_config_errors(tmp_path):
    assert main(["run", str(tmp_path / "nope.ini")]) == 1
    assert main(["run", str(write_cfg(tmp_path, "bogus"))]) == 1
    assert main(["opt", "--dist", "lumpy", "--n-grid", "4"]) == 1
    assert main(["frobnicate"]) == 1


def test_opt_prints_csv(capsys):
    assert main(["opt", "--d", "1", "--n-grid", "2,4,8,16", "--trials", "5", "--seed", "7"]) == 0
    out = capsys.readouterr()
    lines = out.out.strip().splitlines()
    assert lines[0] == "n,mean,se,trials" and len(lines) == 5
    assert "slope" in out.err


def test_fit_command(tmp_path, capsys):
    main(["run", str(write_cfg(tmp_path))])
    capsys.readouterr()
    assert main(["fit", str(tmp_path / "out.csv"), "--field", "cost", "--bootstrap", "50"]) == 0
    fits = json.loads(capsys.readouterr().out)
    assert fits["greedy-uniform"]["points"] == 4
    assert main(["fit", str(tmp_path / "missing.csv")]) == 1


@pytest.mark.parametrize("argv,code", [
    (["check", "triangle", "--p", "2", "--triples", "20000"], 0),
    (["check", "triangle", "--p", "2", "--eta", "1", "--triples", "2000"], 2),
    (["check", "tiebreak"], 0),
    (["check", "monotone", "--cases", "20"], 0),
    (["check", "nn", "--d", "2", "--n-grid", "4,16", "--trials", "5000"], 0),
])
def test_check_suites(argv, code, capsys):
    assert main(argv) == code


def test_triangle_failure_is_certified(capsys):
    main(["check", "triangle", "--p", "2", "--eta", "1", "--triples", "2000"])
    assert "certified=True" in capsys.readouterr().out


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "omm.cli", "check", "tiebreak", "--rule", "lowest-index"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "0 non-increasing violations" in r.stdout
