import csv
import json
import subprocess
import sys
import time

import pytest

from qpns.cli import ConfigError, load_config, parse_override, run_cli


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_parse_override_types():
    assert parse_override("mam.t_list=1,2,4") == (["mam", "t_list"], [1, 2, 4])
    assert parse_override("run.seed=7") == (["run", "seed"], 7)
    assert parse_override("ldp.gamma_lower=none") == (["ldp", "gamma_lower"], None)
    with pytest.raises(ConfigError):
        parse_override("seed=7")
    with pytest.raises(ConfigError):
        parse_override("run.seed")


def test_config_file_and_unknown_keys(tmp_path):
    f = tmp_path / "c.toml"
    f.write_text("[lattice]\nn = 12\n[run]\nseed = 5\n")
    cfg = load_config(str(f), ["run.seed=9"])
    assert cfg["lattice"]["n"] == 12 and cfg["run"]["seed"] == 9
    f.write_text("[lattice]\nbogus = 1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(str(f), [])


def test_validate_fast_and_passing(tmp_path):
    t0 = time.perf_counter()
    assert run_cli(["validate", "--out", str(tmp_path), "--set", "lattice.n=16"]) == 0
    assert time.perf_counter() - t0 < 5.0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["passed"] is True
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "validate" and man["passed"] is True
    assert len(man["config_sha256"]) == 64


def test_unknown_subcommand_prints_usage(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "qpns", "bogus"], capture_output=True, text=True,
                          cwd=tmp_path)
    assert proc.returncode == 2
    assert "usage:" in proc.stderr


def test_config_errors_exit_2(tmp_path, capsys):
    assert run_cli(["validate", "--out", str(tmp_path), "--set", "nope.x=1"]) == 2
    assert run_cli(["validate", "--out", str(tmp_path), "--config", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[lattice\n")
    assert run_cli(["validate", "--out", str(tmp_path), "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def test_skeleton_passes(tmp_path):
    assert run_cli(["skeleton", "--out", str(tmp_path), "--set", "lattice.n=8",
                    "--set", "skeleton.horizon=0.5"]) == 0


def test_mam_table_nonincreasing_and_deterministic(tmp_path):
    args = ["mam", "--set", "lattice.n=8", "--set", "mam.t_list=1,2,4"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(args + ["--out", str(a)]) == 0
    assert run_cli(args + ["--out", str(b), "--set", "run.workers=3"]) == 0
    rows = read_csv(a / "curves.csv")
    assert [float(r["T"]) for r in rows] == [1.0, 2.0, 4.0]
    actions = [float(r["action"]) for r in rows]
    assert all(y <= x * (1 + 1e-6) for x, y in zip(actions, actions[1:]))
    for name in ("curves.csv", "report.json", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_sample_writes_tables(tmp_path):
    args = ["sample", "--out", str(tmp_path), "--set", "lattice.n=8", "--set", "sde.samples=100",
            "--set", "sde.t_list=0.5,1", "--set", "sde.horizon=50"]
    assert run_cli(args) in (0, 1)
    rows = read_csv(tmp_path / "moments.csv")
    assert len(rows) >= 2
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["command"] == "sample"
