import csv
import json
import subprocess
import sys

import pytest

from tbghf.cli import EXIT_CODES, main


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text('inits = ["QH", "VP"]\n[model]\nw1 = "magic"\npw_cutoff = 3.0\nsteps = 2\nrange = [0.2, 0.4]\n'
                    '[grid]\nnkx = 2\nnky = 1\n[interaction]\nff_cutoff = 3.0\n')
    return path


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


def test_exit_code_table():
    assert EXIT_CODES == {"usage": 2, "config": 3, "numerical": 4, "dimension": 5, "io": 6}


def test_usage_errors(capsys):
    assert main([]) == 2
    assert _error(capsys)["error"] == "usage"
    assert main(["bands", "--model", "hubbard"]) == 2
    assert main(["hf", "--w1", "lots"]) == 2


def test_unknown_init_is_usage_error(small_cfg, capsys):
    assert main(["hf", "--config", str(small_cfg), "--init", "AFM"]) == 2


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nrange = [0.0, 0.99]\n")
    assert main(["sweep", "--config", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert "range" in _error(capsys)["message"]
    bad.write_text("[modle]\n")
    assert main(["sweep", "--config", str(bad)]) == 3


def test_numerical_error(small_cfg, capsys):
    assert main(["hf", "--config", str(small_cfg), "--w1", "1e-9", "--nk", "2"]) == 4
    assert _error(capsys)["error"] == "numerical"


def test_dimension_error(capsys):
    assert main(["ed", "--nk", "9"]) == 5
    err = _error(capsys)
    assert err["error"] == "dimension" and "9,075,135,300" in err["message"]


def test_io_error(tmp_path, capsys):
    assert main(["bands", "--cutoff", "3", "--resolution", "3", "--out", str(tmp_path)]) == 6
    assert main(["hf", "--config", str(tmp_path / "missing.toml")]) == 6


def test_bands_csv(tmp_path, capsys):
    out = tmp_path / "bands.csv"
    assert main(["bands", "--model", "chiral", "--w1", "magic", "--cutoff", "3", "--resolution", "5",
                 "--out", str(out)]) == 0
    assert json.loads(capsys.readouterr().out)["points"] == 16
    rows = [r for r in csv.reader(out.read_text().splitlines()) if r and not r[0].startswith("#")]
    assert len(rows) == 17


def test_hf_command(small_cfg, tmp_path, capsys):
    assert main(["hf", "--config", str(small_cfg), "--lambda", "0.3", "--init", "QH,VP",
                 "--out", str(tmp_path / "hf")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc["results"]) == {"QH", "VP"}
    assert (tmp_path / "hf" / "rdm-QH.json").exists() and (tmp_path / "hf" / "trace-VP.csv").exists()


def test_sweep_command(small_cfg, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(small_cfg), "--out", str(out), "--quiet"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["rows"] == 4 and set(doc["transitions"]) == {"QH", "VP"}
    assert {p.name for p in out.iterdir()} == {"sweep.csv", "states.json", "manifest.json"}


@pytest.mark.parametrize("backend", ["numpy", "cython"])
def test_ed_command(small_cfg, capsys, backend):
    from tbghf import ed
    if backend == "cython" and ed._assemble_coo_compiled is None:
        pytest.skip("compiled kernel not built")
    assert main(["ed", "--config", str(small_cfg), "--nk", "2", "--lambda", "0.3", "--backend", backend]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["grid"] == [2, 1] and doc["dimension"] == 38 and doc["backend"] == backend
    assert doc["correlation_energy_per_site"] <= 0


def test_validate_subset(capsys):
    assert main(["validate", "--only", "relaxed_first_shell_ratio", "candidate_order_parameters"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2 and "2/2 checks passed" in out


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "tbghf.cli", "ed", "--nk", "5"], capture_output=True, text=True)
    assert res.returncode == 5
