import json
import subprocess
import sys

import pytest

from mmicl import cli, experiments

SMALL = {"N": 40, "L_tr": 10, "n_test_prompts": 20, "n_repeats": 1, "L_te_grid": [8], "T_grid": [2], "T": 2, "quadrature_nodes": 32}


@pytest.fixture(autouse=True)
def serial(monkeypatch):
    monkeypatch.setenv(experiments.WORKERS_ENV, "1")


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_run_writes_results_and_metadata(tmp_path, config, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(config), "--experiment", "fig2", "--seed", "5", "--out", str(out)]) == 0
    rows = experiments.read_csv_table(out / "fig2.csv")
    assert rows and all(r.seed == 5 for r in rows)
    meta = json.loads((out / "fig2.meta.json").read_text())
    assert meta["seed"] == 5 and meta["config"]["N"] == 40
    assert {"config_hash", "package_version", "numpy_version", "python_version"} <= set(meta)
    assert "wrote" in capsys.readouterr().err


def test_json_format(tmp_path, config):
    assert cli.main(["run", "--config", str(config), "--experiment", "landscape", "--out", str(tmp_path), "--format", "json"]) == 0
    data = json.loads((tmp_path / "landscape.json").read_text())
    assert data["fields"] == experiments.SURFACE_FIELDS


def test_rerun_is_byte_identical(tmp_path, config):
    for d in ("a", "b"):
        assert cli.main(["run", "--config", str(config), "--experiment", "fig3", "--out", str(tmp_path / d)]) == 0
    for name in ("fig3.csv", "fig3.meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("content", ['{"N": -1}', "not json", "[1, 2]", '{"bogus": true}'])
def test_bad_config_exit_code(tmp_path, content, capsys):
    p = tmp_path / "bad.json"
    p.write_text(content)
    assert cli.main(["run", "--config", str(p), "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG


def test_bad_workers(monkeypatch, config):
    monkeypatch.setenv(experiments.WORKERS_ENV, "zero")
    assert cli.main(["run", "--config", str(config)]) == cli.EXIT_CONFIG


def test_unwritable_output(tmp_path, config):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["run", "--config", str(config), "--out", str(blocker / "sub")]) == cli.EXIT_CONFIG


def test_unknown_experiment_rejected_by_parser():
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--experiment", "fig9"])
    assert exc.value.code == 2


def test_check_passes(capsys):
    assert cli.main(["check"]) == cli.EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_check_reports_failure(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_checks", lambda seed: [("broken", False, "detail")])
    assert cli.main(["check"]) == cli.EXIT_INVARIANT
    assert "FAIL  broken" in capsys.readouterr().out


def test_console_script_module():
    res = subprocess.run([sys.executable, "-m", "mmicl.cli", "check"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0, res.stderr
