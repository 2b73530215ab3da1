import json

import pytest

from zvonkin.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_validate_dividend_defaults(tmp_path, capsys):
    code, out, _ = run(capsys, "validate", "--out", str(tmp_path))
    assert code == 0
    data = json.loads((tmp_path / "validation.json").read_text())
    assert data["passed"] is True
    assert "ellipticity" in out


def test_validate_degenerate_first_row(tmp_path, capsys):
    cfg = tmp_path / "m.toml"
    cfg.write_text(
        '[model]\nname = "expression"\ndim = 2\ndrift_plus = ["-1", "0"]\ndrift_minus = ["1", "0"]\n'
        'diffusion = [["0", "0"], ["0", "1"]]\n'
    )
    code, _, _ = run(capsys, "validate", "--config", str(cfg), "--out", str(tmp_path))
    assert code == 1


def test_malformed_toml_exit_3(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[model\n")
    code, _, err = run(capsys, "validate", "--config", str(cfg))
    assert code == 3 and "configuration error" in err


def test_usage_errors_exit_3(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--paths", "many"])
    assert exc.value.code == 3
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 3
    capsys.readouterr()


def test_transform_check_dividend(tmp_path, capsys):
    code, out, _ = run(capsys, "transform-check", "--out", str(tmp_path), "--dump-chart", "--json")
    assert code == 0
    data = json.loads(out)
    assert data == json.loads((tmp_path / "transform_check.json").read_text())
    assert data["ode_residual_max"]["g1"] <= 1e-6
    assert data["roundtrip_max"] <= 1e-10
    assert data["drift_jump_original"] == pytest.approx(1.0)
    assert data["drift_jump_max"] <= 1e-6
    assert (tmp_path / "chart.json").exists()


def test_transform_check_zero_drift(tmp_path, capsys):
    cfg = tmp_path / "z.toml"
    cfg.write_text('[model]\nname = "expression"\ndim = 2\ndrift_plus = ["0", "0"]\ndiffusion = [["1", "0"], ["0", "1"]]\n')
    code, out, _ = run(capsys, "transform-check", "--config", str(cfg), "--out", str(tmp_path), "--json")
    data = json.loads(out)
    assert code == 0
    assert all(v == 0.0 for v in data["ode_residual_max"].values())


def test_transform_check_piecewise(tmp_path, capsys):
    code, out, _ = run(capsys, "transform-check", "--model", "piecewise-constant-1d", "--out", str(tmp_path), "--json")
    data = json.loads(out)
    assert code == 0 and data["drift_jump_max"] <= 1e-6


def test_transform_check_forced_radius_fails(tmp_path, capsys):
    code, _, err = run(capsys, "transform-check", "--radius", "1000", "--out", str(tmp_path))
    assert code == 2 and "ChartBuildError" in err


def test_simulate_smoke_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        code, _, _ = run(capsys, "simulate", "--paths", "100", "--step", "0.01", "--seed", "5", "--out", str(d))
        assert code == 0
    files = sorted(p.name for p in (a / "paths").iterdir())
    assert len(files) == 100 and files[0] == "path_000000.csv"
    for name in files:
        assert (a / "paths" / name).read_bytes() == (b / "paths" / name).read_bytes()
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    summary = json.loads((a / "summary.json").read_text())
    assert summary["terminations"] == {"explosion_guard": 0, "horizon": 100}


def test_simulate_jsonl_and_transformed(tmp_path, capsys):
    cfg = tmp_path / "s.toml"
    cfg.write_text('[output]\nformat = "jsonl"\nrecord_paths = 3\n')
    code, _, _ = run(
        capsys, "simulate", "--config", str(cfg), "--paths", "10", "--step", "0.02", "--scheme", "transformed",
        "--out", str(tmp_path),
    )
    assert code == 0
    lines = (tmp_path / "paths.jsonl").read_text().splitlines()
    assert len(lines) == 3 * 51
    assert json.loads(lines[0]) == {"path": 0, "state": [0.5, 0.5], "t": 0.0}


def test_simulate_tiny_guard_exit_2(tmp_path, capsys):
    cfg = tmp_path / "g.toml"
    cfg.write_text("[simulation]\nr_max = 1e-3\n")
    code, _, _ = run(capsys, "simulate", "--config", str(cfg), "--paths", "100", "--out", str(tmp_path))
    assert code == 2
    assert json.loads((tmp_path / "summary.json").read_text())["terminations"]["explosion_guard"] == 100


def test_counterexample_default(tmp_path, capsys):
    code, out, _ = run(capsys, "counterexample", "--out", str(tmp_path))
    assert code == 0
    assert out.count("collapse") == 3
    data = json.loads((tmp_path / "counterexample.json").read_text())
    for row in data["runs"]:
        assert row["max_abs"] <= row["h"] / 2
    assert (tmp_path / "counterexample_h0.001.csv").exists()


def test_counterexample_sgn_plus_one(tmp_path, capsys):
    code, _, _ = run(capsys, "counterexample", "--sgn0", "1", "--out", str(tmp_path))
    data = json.loads((tmp_path / "counterexample.json").read_text())
    assert code == 0 and all(r["max_abs"] <= r["h"] for r in data["runs"])


def test_counterexample_contrast(tmp_path, capsys):
    code, out, _ = run(capsys, "counterexample", "--noise", "1", "--out", str(tmp_path))
    assert code == 0 and "escapes" in out


def test_compare(tmp_path, capsys):
    code, out, _ = run(
        capsys, "compare", "--model", "piecewise-constant-1d", "--paths", "2000", "--step", "0.01",
        "--out", str(tmp_path), "--json",
    )
    data = json.loads(out)
    assert code == (0 if data["weak_comparison"]["z_score"] <= 3 else 2)
    assert data["checks"]["z_score"] == (code == 0)
    assert (tmp_path / "comparison.json").exists()


def test_flags_before_subcommand(tmp_path, capsys):
    code, _, _ = run(capsys, "--out", str(tmp_path), "--seed", "3", "counterexample")
    assert code == 0 and (tmp_path / "counterexample.json").exists()
