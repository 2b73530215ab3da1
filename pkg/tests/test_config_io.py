import json
from pathlib import Path

import numpy as np
import pytest

from zvonkin import config, io
from zvonkin.engine import Trajectory
from zvonkin.errors import ConfigError


def write(tmp_path: Path, text: str) -> Path:
    p = tmp_path / "cfg.toml"
    p.write_text(text, encoding="utf-8")
    return p


def test_defaults():
    cfg = config.resolve({})
    assert cfg.model_name == "dividend"
    np.testing.assert_array_equal(cfg.x0, [0.5, 0.5])
    assert cfg.sim.step == 1e-3 and cfg.sim.horizon == 1.0 and cfg.sim.n_paths == 100
    assert cfg.thresholds.ode_residual == 1e-6 and cfg.thresholds.z_max == 3.0
    assert cfg.out_format == "csv"


def test_file_values_and_flag_overrides(tmp_path):
    p = write(
        tmp_path,
        """
[model]
name = "dividend"
params = { kappa = 2.0, sigma = 0.5 }
x0 = [0.1, 0.4]
[simulation]
step = 0.01
horizon = 2.0
paths = 7
seed = 99
scheme = "transformed"
phi = "x1^2"
[tolerances]
quadrature = 1e-9
z_max = 4
[output]
dir = "results"
format = "jsonl"
""",
    )
    cfg = config.load(p, {"paths": 11, "step": None})
    assert cfg.field.params["kappa"] == 2.0 and cfg.field.params["sigma"] == 0.5
    assert cfg.sim.n_paths == 11 and cfg.sim.step == 0.01 and cfg.sim.base_seed == 99
    assert cfg.sim.scheme == "transformed" and cfg.tolerances.quadrature == 1e-9
    assert cfg.thresholds.z_max == 4.0 and cfg.out_format == "jsonl"
    assert cfg.out_dir == Path("results")
    np.testing.assert_allclose(cfg.phi()(np.array([[3.0, 1.0]])), [9.0])


def test_model_flag_replaces_model_table(tmp_path):
    p = write(tmp_path, '[model]\nname = "dividend"\nparams = { kappa = 3.0 }\n')
    cfg = config.load(p, {"model": "piecewise-constant-1d"})
    assert cfg.field.dim == 1 and cfg.x0.tolist() == [0.0]


def test_expression_model_with_graph_surface(tmp_path):
    p = write(
        tmp_path,
        """
[model]
name = "expression"
dim = 2
params = { k = 0.5 }
drift_plus = ["x2 - k", "0"]
drift_minus = ["x2", "0"]
diffusion = [["1", "0"], ["0.1", "0"]]
surface = { kind = "graph", b = "y^2" }
x0 = [0.2, 0.3]
""",
    )
    cfg = config.load(p)
    f = cfg.field
    assert f.switch is not None
    np.testing.assert_allclose(f.drift([[0.2, 0.3], [0.0, 0.3]])[:, 0], [0.3 - 0.5, 0.3])
    assert f.zero_drift == (1,) and f.active_columns == (0,)


@pytest.mark.parametrize(
    "text",
    [
        "[model\nname=1",  # malformed TOML
        "[nonsense]\na = 1\n",
        '[model]\nname = "nope"\n',
        '[simulation]\nstep = "fast"\n',
        "[simulation]\nstep = -1.0\n",
        "[simulation]\nwarp = 1\n",
        '[simulation]\nscheme = "milstein"\n',
        "[tolerances]\nquadrature = 0\n",
        "[tolerances]\nz_max = -1\n",
        '[output]\nformat = "xml"\n',
        "[model]\nx0 = [1.0]\n",
        '[model]\nname = "expression"\ndim = 1\ndrift_plus = ["x1 +"]\ndiffusion = [["1"]]\n',
        "[counterexample]\nsgn0 = 0.5\n",
        '[simulation]\nphi = "x9"\n',
    ],
)
def test_invalid_configs_raise_config_error(tmp_path, text):
    with pytest.raises(ConfigError):
        config.load(write(tmp_path, text))


def test_missing_file():
    with pytest.raises(ConfigError):
        config.load("/nonexistent/cfg.toml")


def test_with_sim():
    cfg = config.with_sim(config.resolve({}), n_paths=3)
    assert cfg.sim.n_paths == 3


# ----------------------------------------------------------------------
def _traj():
    t = np.array([0.0, 0.1, 0.2])
    return Trajectory(t, np.array([[0.1, 0.2], [1 / 3, -0.5], [2.0, 1e-300]]), "horizon", path_index=3)


def test_csv_layout_and_exact_floats(tmp_path):
    path = io.write_csv(_traj(), tmp_path / "a.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x1,x2"
    assert len(lines) == 4
    back = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(back[:, 1:], _traj().states)


def test_csv_dir_and_jsonl(tmp_path):
    files = io.write_csv_dir([_traj()], tmp_path / "paths")
    assert files[0].name == "path_000003.csv"
    jl = io.write_jsonl([_traj()], tmp_path / "p.jsonl")
    recs = [json.loads(line) for line in jl.read_text().splitlines()]
    assert recs[1] == {"path": 3, "t": 0.1, "state": [1 / 3, -0.5]}


def test_canonical_json():
    text = io.dumps({"b": np.float64(0.1), "a": [np.int64(2), np.bool_(True), float("nan")], "c": np.arange(2)})
    assert text == '{\n  "a": [\n    2,\n    true,\n    "nan"\n  ],\n  "b": 0.1,\n  "c": [\n    0,\n    1\n  ]\n}\n'


def test_chart_dump_roundtrip(tmp_path, pc_field, pc_chart):
    p = io.dump_chart(pc_chart, tmp_path / "chart.json")
    again = io.load_chart(pc_field, p)
    x = np.array([[0.3], [-0.7]])
    np.testing.assert_array_equal(again.apply_G(x), pc_chart.apply_G(x))
    assert again.radius == pc_chart.radius
