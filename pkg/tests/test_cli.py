import re

import pytest

from dwrfem import adapt, cli
from dwrfem.config import ConfigError, bundled_configs, load_config, parse_config, tomllib

MINIMAL = """
name = "mini"
kind = "single_goal"
[problem]
kind = "poisson"
source = -1.0
[domain]
bbox = [0.0, 0.0, 1.0, 1.0]
nx = 2
ny = 2
[goal]
kind = "point_value"
point = [0.5, 0.5]
[discretization]
primal_degree = 1
enriched_degree = 2
[adapt]
max_steps = 3
"""


def _parse(text):
    return parse_config(tomllib.loads(text))


def _table_rows(path):
    lines = path.read_text().splitlines()
    return [l.split() for l in lines[3:-1]]


def test_catalog(capsys):
    names = list(bundled_configs())
    assert len(names) >= 12
    assert len(set(names)) == len(names)
    for n in [f"example1_comp{i}" for i in range(1, 11)] + ["example2_multigoal", "example2_l2",
                                                             "ode_study"]:
        assert n in names
    for path in bundled_configs().values():
        cfg = load_config(path)
        assert cfg.name == path.stem and cfg.description
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == len(names)


def test_minimal_config_parses():
    cfg = _parse(MINIMAL)
    assert cfg.loop.max_steps == 3 and cfg.loop.theta == 0.5
    assert cfg.references is None


@pytest.mark.parametrize("patch, message", [
    (("max_steps = 3", "max_steps = 3\nbogus = 1"), "unknown keys"),
    (("enriched_degree = 2", "enriched_degree = 1"), "galerkin_demo"),
    (("point = [0.5, 0.5]", "point = [1.5, 0.5]"), "outside"),
    (("max_steps = 3", "max_steps = 3\ntheta = 1.5"), "theta"),
    (('kind = "single_goal"', 'kind = "transient"'), "kind"),
    (('kind = "poisson"', 'kind = "stokes"'), "problem"),
    (("nx = 2", "nx = 2.5"), "integer"),
])
def test_config_errors(patch, message):
    with pytest.raises(ConfigError, match=message):
        _parse(MINIMAL.replace(*patch))


def test_galerkin_demo_flag_allows_equal_degrees():
    cfg = _parse(MINIMAL.replace("enriched_degree = 2", "enriched_degree = 1\ngalerkin_demo = true"))
    assert cfg.loop.enriched_degree == 1


def test_malformed_config_exit_2_without_outputs(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(MINIMAL.replace("[domain]", "[domain\n"))
    out = tmp_path / "out"
    assert cli.main(["run", str(bad), "--output-dir", str(out)]) == 2
    assert not out.exists()
    assert "config error" in capsys.readouterr().err
    # one bad config in a batch also stops everything before any output
    assert cli.main(["run", "example1_comp1", str(bad), "--output-dir", str(out)]) == 2
    assert not out.exists()


def test_comp1_single_zero_row(tmp_path):
    assert cli.main(["run", "example1_comp1", "--output-dir", str(tmp_path), "--quiet"]) == 0
    rows = _table_rows(tmp_path / "example1_comp1" / "table.txt")
    assert len(rows) == 1
    assert rows[0][2:] == ["0.00e+00"] * 4
    assert (tmp_path / "example1_comp1" / "step_000.vtk").exists()


def test_comp2_table_band_and_outputs(tmp_path):
    assert cli.main(["run", "example1_comp2", "--output-dir", str(tmp_path), "--quiet"]) == 0
    d = tmp_path / "example1_comp2"
    rows = _table_rows(d / "table.txt")
    assert 5 <= len(rows) <= 9
    assert 0.9 <= float(rows[-1][4]) <= 1.25
    assert len(list(d.glob("step_*.vtk"))) == len(rows)
    assert len((d / "steps.csv").read_text().splitlines()) == len(rows) + 1
    vtk = (d / "step_000.vtk").read_text()
    assert "SCALARS u double 1" in vtk and "SCALARS indicator double 1" in vtk


def test_rerun_is_byte_identical(tmp_path):
    cfg = tmp_path / "mini.toml"
    cfg.write_text(MINIMAL)
    outs = []
    for i in range(2):
        assert cli.main(["run", str(cfg), "--output-dir", str(tmp_path / f"r{i}"), "--quiet"]) == 0
        outs.append((tmp_path / f"r{i}" / "mini" / "steps.csv").read_bytes())
    assert outs[0] == outs[1]


def test_numerical_failure_exit_3_keeps_partial_outputs(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "mini.toml"
    cfg.write_text(MINIMAL)
    real = adapt._solve_primal
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 2:       # step 0 needs two solves (primal and enriched)
            from dwrfem.solvers import LinearSolveError
            raise LinearSolveError("injected failure")
        return real(*args, **kwargs)

    monkeypatch.setattr(adapt, "_solve_primal", flaky)
    assert cli.main(["run", str(cfg), "--output-dir", str(tmp_path), "--quiet"]) == 3
    assert len(_table_rows(tmp_path / "mini" / "table.txt")) == 1
    assert (tmp_path / "mini" / "steps.csv").exists()
    assert "numerical failure" in capsys.readouterr().err


def test_ode_study_outputs(tmp_path):
    assert cli.main(["run", "ode_study", "--output-dir", str(tmp_path), "--quiet"]) == 0
    rows = _table_rows(tmp_path / "ode_study" / "table.txt")
    assert [int(r[0]) for r in rows] == [16, 32, 64, 128, 256, 512]
    assert all(0.9 < float(r[5]) < 1.1 for r in rows)


def test_parallel_jobs(tmp_path):
    code = cli.main(["run", "example1_comp1", "example1_comp6", "ode_study", "--jobs", "2",
                     "--output-dir", str(tmp_path), "--quiet"])
    assert code == 0
    for name in ("example1_comp1", "example1_comp6", "ode_study"):
        assert (tmp_path / name / "table.txt").exists()


def test_bad_jobs_and_unknown_experiment(tmp_path):
    assert cli.main(["run", "example1_comp1", "--jobs", "0", "--output-dir", str(tmp_path)]) == 2
    assert cli.main(["run", "no_such_thing", "--output-dir", str(tmp_path)]) == 2
