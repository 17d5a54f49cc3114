import json
from pathlib import Path

import pytest

from bidyadic.cli import Config, csv_text, dumps, fmt_num, main, run
from bidyadic.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_haar_check_default_config_passes(tmp_path):
    res = run("haar-check", str(CONFIGS / "haar_check.ini"), out=str(tmp_path))
    assert res.code == 0, res.message
    doc = json.loads((tmp_path / "haar_check.json").read_text())
    assert doc["passed"] and all(a["passed"] for a in doc["assertions"])
    assert (tmp_path / "haar_check.meta.json").exists()
    assert not (tmp_path / "haar_check.witness.json").exists()


def test_missing_required_field_names_it(tmp_path):
    res = run("kernel-check", text="[lattice]\nM = 1\nL = 1\n[kernel]\nbudget = 10\n", out=str(tmp_path))
    assert res.code == 1
    assert "[kernel] name" in res.message


def test_unknown_field_reports_line(tmp_path):
    res = run("bmo", text="[run]\nseed = 1\n\n[bmo]\ntrails = 3\n", out=str(tmp_path))
    assert res.code == 1 and ":5:" in res.message and "trails" in res.message


@pytest.mark.parametrize("text", ["[lattice]\nM = one\n", "no section header\n", "[lattice]\nM = 0\nL = 1\n"])
def test_malformed_configs(tmp_path, text):
    assert run("haar-check", text=text, out=str(tmp_path)).code == 1


def test_unknown_subcommand():
    assert run("frobnicate", text="").code == 1


def test_missing_config_file(tmp_path):
    assert run("ap", str(tmp_path / "nope.ini"), out=str(tmp_path)).code == 1


def test_failed_assertion_writes_witness(tmp_path):
    text = "[lattice]\nM = 1\nL = 1\n[kernel]\nname = riesz_tensor\nbudget = 50\nexpect = decaying\n"
    res = run("kernel-check", text=text, out=str(tmp_path))
    assert res.code == 2
    wit = json.loads((tmp_path / "kernel_check.witness.json").read_text())
    assert wit["failed"][0]["name"] == "hypothesis verdicts decaying"


def test_reruns_are_byte_identical(tmp_path):
    cfg = str(CONFIGS / "bmo.ini")
    run("bmo", cfg, out=str(tmp_path / "a"))
    run("bmo", cfg, out=str(tmp_path / "b"))
    for f in sorted((tmp_path / "a").iterdir()):
        if f.name.endswith(".meta.json"):
            continue
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_seed_override_is_echoed(tmp_path):
    res = run("bmo", str(CONFIGS / "bmo.ini"), out=str(tmp_path), seed=9)
    assert res.code == 0
    doc = json.loads((tmp_path / "bmo.json").read_text())
    assert doc["seed"] == 9 and doc["config"]["run"]["seed"] == "9"


def test_csv_files_carry_config_header(tmp_path):
    run("bmo", str(CONFIGS / "bmo.ini"), out=str(tmp_path))
    first = (tmp_path / "cmo_defect.csv").read_text().splitlines()[0]
    assert first.startswith("# config: ")
    assert json.loads(first[len("# config: "):])["bmo"]["trials"] == "5"


def test_number_formatting():
    assert fmt_num(0.1) == "0.10000000000000001"
    assert json.loads(dumps({"b": 0.1, "a": [1, 2.5]})) == {"a": [1, 2.5], "b": 0.1}
    assert dumps({"b": 1, "a": 2}).index('"a"') < dumps({"b": 1, "a": 2}).index('"b"')
    text = csv_text(["x"], [[0.1]], {"run": {}})
    assert "0.10000000000000001" in text


def test_config_typed_access():
    cfg = Config("[s]\nn = 0x10\nflag = yes\nxs = 1, 2\n", "<t>")
    assert cfg.get("s", "n", int) == 16 and cfg.get("s", "flag", bool) is True
    assert cfg.get("s", "xs", "floats") == [1.0, 2.0]
    with pytest.raises(ConfigError, match="<t>:3"):
        cfg.get("s", "flag", int)


def test_main_entry_point(tmp_path, capsys):
    code = main(["ap", "--config", str(CONFIGS / "ap.ini"), "--out", str(tmp_path), "--threads", "1"])
    assert code == 0
    assert (tmp_path / "ap.json").exists()
