import json
import subprocess
import sys
from pathlib import Path

import pytest

from nvbath import cli

SMALL = """
scenario = "loglog-depth-sweep"
seed = 5
shots = 2000
densities = [0.005]
depths = [3.0, 5.0]

[tau]
spacing = "log"
unit = "tau_c"
start = 0.1
stop = 10.0
num = 12
"""


def _write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _files(d: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_rerun_is_byte_identical_across_threads(tmp_path):
    cfg = _write(tmp_path, SMALL)
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == {"curves.csv", "slopes.csv", "exact.csv", "manifest.json"}
    assert a == b


def test_manifest_lists_every_file_with_hash(tmp_path):
    b = cli.run(cli.load_config(_write(tmp_path, SMALL)), out=tmp_path / "o")
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert sorted(f["name"] for f in man["files"]) == sorted(b.files)
    assert all(f["config_hash"] == man["config_hash"] == b.config_hash for f in man["files"])
    assert man["schema_version"] == cli.MANIFEST_SCHEMA


def test_config_hash_changes_iff_semantic_fields_change(tmp_path):
    base = cli.config_from_dict({"scenario": "loglog-depth-sweep", "seed": 1, "depths": [5.0]})
    same = cli.config_from_dict({"scenario": "loglog-depth-sweep", "seed": 1, "depths": [5], "out": "elsewhere"})
    assert cli.config_hash(base) == cli.config_hash(same)
    for change in ({"seed": 2}, {"depths": [5.5]}, {"shots": 100}, {"densities": [0.004]},
                   {"tau": {"spacing": "linear", "unit": "us", "start": 0.1, "stop": 5.0, "num": 10}}):
        other = cli.config_from_dict({"scenario": "loglog-depth-sweep", "seed": 1, "depths": [5.0], **change})
        assert cli.config_hash(other) != cli.config_hash(base), change


def test_seed_override_changes_hash(tmp_path):
    p = _write(tmp_path, SMALL)
    assert cli.config_hash(cli.load_config(p)) != cli.config_hash(cli.load_config(p, seed=6))


def test_tampered_table_fails_verification(tmp_path):
    cli.run(cli.load_config(_write(tmp_path, SMALL)), out=tmp_path / "o")
    assert cli.verify(tmp_path / "o")["status"] == "pass"
    p = tmp_path / "o" / "slopes.csv"
    p.write_text(p.read_text().replace("0.", "0.1", 1))
    rep = cli.verify(tmp_path / "o")
    assert rep["status"] == "fail"
    assert any("config-hash mismatch" in c["detail"] for c in rep["checks"] if not c["passed"])
    assert cli.main(["verify", str(tmp_path / "o")]) == 1


def test_missing_table_is_enumerated(tmp_path):
    cli.run(cli.load_config(_write(tmp_path, SMALL)), out=tmp_path / "o")
    (tmp_path / "o" / "exact.csv").unlink()
    rep = cli.verify(tmp_path / "o")
    assert rep["status"] == "fail"
    assert any("exact.csv" in c["detail"] for c in rep["checks"])


def test_empty_bundle_fails_explicitly(tmp_path):
    rep = cli.verify(tmp_path)
    assert rep["status"] == "fail" and "nothing to verify" in rep["reason"]
    out = tmp_path / "r.json"
    assert cli.main(["verify", str(tmp_path), "--report", str(out)]) == 1
    assert json.loads(out.read_text())["status"] == "fail"


@pytest.mark.parametrize("text", [
    'scenario = "nope"\nseed = 1\n',
    'scenario = "loglog-depth-sweep"\n',                       # no seed
    'scenario = "loglog-depth-sweep"\nseed = 1\ndepths = []\n',
    'scenario = "loglog-depth-sweep"\nseed = 1\nshots = 0\n',
    'scenario = "loglog-depth-sweep"\nseed = 1\nbogus = 3\n',
    'scenario = "loglog-depth-sweep"\nseed = 1\n[tau]\nunit = "ms"\n',
    'this is not toml = = =',
])
def test_bad_config_exit_code_2(tmp_path, text):
    assert cli.main(["run", "--config", str(_write(tmp_path, text)), "--out", str(tmp_path / "o")]) == 2


def test_exponent_scenario_runs_and_verifies(tmp_path):
    text = """
scenario = "exponent-vs-depth"
seed = 3
shots = 4000
densities = [0.004]
depths = [1.2, 5.0, 30.0]
"""
    b = cli.run(cli.load_config(_write(tmp_path, text)), out=tmp_path / "o")
    assert b.ok and set(b.files) == {"curves.csv", "fits.csv"}
    fits = (tmp_path / "o" / "fits.csv").read_text().splitlines()
    assert fits[0].startswith("sigma,depth,depth_over_nn,n")
    assert len(fits) == 4


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, SMALL)
    r = subprocess.run([sys.executable, "-m", "nvbath", "run", "--config", str(cfg), "--out", str(tmp_path / "o"),
                        "--verify"], capture_output=True, text=True, timeout=300)
    assert r.returncode == 0, r.stderr
    assert json.loads(r.stdout[r.stdout.index("{"):])["status"] == "pass"
