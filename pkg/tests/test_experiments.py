import csv
import dataclasses
import hashlib
import io
import json

import numpy as np
import pytest

from tbghf.experiments import (CSV_COLUMNS, ConfigError, RunConfig, SweepRow, detect_transition, load_config,
                               post_transition_defect, prepare, run_point, run_sweep)
from tbghf.gauge import CANDIDATES
from tbghf.hamiltonians import BandGapError


def small_config(**over) -> RunConfig:
    base = {"model": {"family": "bm", "w1": "magic", "range": [0.2, 0.6], "steps": 3, "pw_cutoff": 3.0},
            "grid": {"nkx": 2, "nky": 1}, "interaction": {"ff_cutoff": 3.0}, "inits": ["QH", "VP", "KIVC"]}
    cfg = RunConfig.from_dict(base)
    return cfg.replace(**over) if over else cfg


def test_defaults_are_valid():
    cfg = RunConfig()
    assert cfg.inits == CANDIDATES
    assert len(cfg.lambdas) == cfg.model.steps
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("data", [
    {"colour": 1},
    {"model": {"kappa": 0.3}},
    {"model": {"range": [0.0, 0.99]}},
    {"model": {"family": "relaxed", "range": [0.0, 1.2]}},
    {"model": {"family": "hubbard"}},
    {"model": {"steps": 0}},
    {"model": {"w1": -3.0}},
    {"model": {"w1": "max"}},
    {"inits": ["QH", "AFM"]},
    {"inits": []},
    {"grid": {"nkx": 0}},
    {"flags": {"workers": 0}},
    {"grid": 4},
])
def test_config_rejections(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


def test_relaxed_range_allows_one():
    cfg = RunConfig.from_dict({"model": {"family": "relaxed", "range": [0.0, 1.0]}})
    assert cfg.lambdas[-1] == 1.0


def test_toml_and_json_loaders(tmp_path):
    (tmp_path / "run.toml").write_text('inits = "all"\n[model]\nfamily = "bm"\nsteps = 4\nrange = [0.1, 0.5]\n'
                                       '[grid]\nnkx = 3\nnky = 3\n')
    cfg = load_config(tmp_path / "run.toml")
    assert cfg.model.steps == 4 and cfg.grid.nkx == 3 and cfg.inits == CANDIDATES
    (tmp_path / "run.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "run.json") == cfg
    (tmp_path / "bad.toml").write_text("[model\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.toml")


def test_replace_dotted_keys():
    cfg = RunConfig().replace(**{"model.steps": 5, "grid.nkx": 2})
    assert cfg.model.steps == 5 and cfg.grid.nkx == 2
    with pytest.raises(ConfigError):
        RunConfig().replace(**{"model.range": [0.5, 0.1]})


def _row(lam, value, init="QH", converged=True):
    return SweepRow(lam, init, 0.0, 0.0, 1.0, value, 0.0, 0.0, 3, converged)


def test_detect_transition():
    flat = detect_transition([(x, 0.2) for x in np.linspace(0, 1, 6)])
    assert flat.lam_star is None and not flat.multiple
    t = detect_transition([(0.0, 0.0), (0.2, 0.1), (0.4, 0.9), (0.6, 1.0)])
    assert t.lam_star == pytest.approx(0.3) and not t.multiple
    twice = detect_transition([(0.0, 0.0), (0.2, 0.9), (0.4, 0.1), (0.6, 0.95)])
    assert twice.multiple and twice.crossings == pytest.approx([0.1, 0.3, 0.5])


def test_detect_transition_filters_rows():
    rows = [_row(0.0, 0.0), _row(0.2, 0.9, converged=False), _row(0.4, 0.1), _row(0.6, 0.9),
            _row(0.2, 1.0, init="VP")]
    t = detect_transition(rows, "QH")
    assert t.crossings == pytest.approx([0.5])


def test_post_transition_defect():
    block = 0.5 * np.array([[1, -1], [-1, 1]])
    P = np.kron(np.eye(2), block)[None].repeat(3, axis=0)
    assert post_transition_defect(P) == 0.0
    P[1, 0, 0] += 0.1
    assert post_transition_defect(P) == pytest.approx(0.1)


@pytest.fixture(scope="module")
def sweep():
    return run_sweep(small_config())


def test_sweep_rows(sweep):
    cfg = small_config()
    assert len(sweep.rows) == len(cfg.lambdas) * len(cfg.inits)
    keys = [(r.lam, r.init) for r in sweep.rows]
    assert keys == sorted(keys)
    for lam in cfg.lambdas:
        sel = [r for r in sweep.rows if r.lam == lam]
        de = np.array([r.delta_e for r in sel])
        assert np.all(de >= 0) and de.min() == 0.0
    for r in sweep.rows:
        if r.converged:
            assert r.gap > 0
            assert all(0 <= o <= 2 + 1e-9 for o in (r.O_c2zt, r.O_nuxT, r.O_nuyT))


def test_sweep_csv_and_manifest(sweep, tmp_path):
    manifest = sweep.write(tmp_path)
    text = (tmp_path / "sweep.csv").read_text()
    assert manifest["outputs"]["sweep.csv"] == hashlib.sha256(text.encode()).hexdigest()
    lines = text.splitlines()
    assert lines[0].startswith("# schema")
    reader = list(csv.reader(io.StringIO("\n".join(lines[1:]))))
    assert tuple(reader[0]) == CSV_COLUMNS
    assert len(reader) == 1 + len(sweep.rows)
    saved = json.loads((tmp_path / "manifest.json").read_text())
    assert saved["config_hash"] == manifest["config_hash"]
    assert saved["resolved"]["w1"] == pytest.approx(prepare(small_config()).w1)
    states = json.loads((tmp_path / "states.json").read_text())
    assert len(states) == len(sweep.rows)


def test_sweep_is_deterministic_and_cached(sweep, tmp_path):
    cfg = small_config(**{"flags.cache_dir": str(tmp_path / "cache")})
    first = run_sweep(cfg)
    assert len(list((tmp_path / "cache").glob("point-*.npz"))) == len(cfg.lambdas)
    second = run_sweep(cfg)
    assert first.to_csv() == second.to_csv() == sweep.to_csv()


def test_warm_start_spot_check():
    cfg = small_config(**{"flags.warm_start": True})
    warm = run_sweep(cfg)
    cold = run_sweep(small_config())
    for rw, rc in zip(warm.rows, cold.rows):
        assert (rw.lam, rw.init) == (rc.lam, rc.init)
        if rw.converged and rc.converged and rw.init == "QH":
            assert rw.energy_per_site == pytest.approx(rc.energy_per_site, abs=1e-5)


def test_run_point_with_ed():
    cfg = small_config(**{"flags.ed": True, "model.steps": 1})
    res = run_point(prepare(cfg), 0.3)
    assert all(np.isfinite(r.e_ed_per_site) for r in res.rows)
    assert all(r.e_corr_per_site <= 1e-9 for r in res.rows)


def test_gap_failure_recorded_as_row():
    cfg = small_config(**{"model.steps": 1, "grid.nky": 2})
    setup = dataclasses.replace(prepare(cfg), w1=1e-9)
    res = run_point(setup, 0.0)
    assert [r.error for r in res.rows] == ["BandGapError"] * len(cfg.inits)
    assert all(np.isnan(r.energy_per_site) and not r.converged for r in res.rows)


def test_gapless_chiral_endpoint_is_fatal():
    with pytest.raises(BandGapError):
        prepare(small_config(**{"model.w1": 1e-9, "grid.nky": 2}))


@pytest.mark.slow
def test_relax_flag_rebuilds_tables():
    cfg = small_config(**{"model.family": "relaxed", "model.range": [1.0, 1.0], "model.steps": 1,
                          "flags.relax": True})
    tables = prepare(cfg).tables
    assert 0.6 <= tables.first_shell_ratio() <= 0.8
    assert tables.first_shell_ratio() != pytest.approx(prepare(cfg.replace(**{"flags.relax": False})).tables
                                                       .first_shell_ratio(), abs=1e-3)
