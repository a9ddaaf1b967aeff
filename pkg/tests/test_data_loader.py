from pathlib import Path

import pytest

from data_loader import (
    build_model,
    build_problem,
    load_config,
    parse_config,
    pbar_threshold,
    profile_preset,
    read_two_column,
)
from errors import ConfigurationError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

MINIMAL = """\
[gas]
gamma = 1.4
pbar = 2.0

[numerics]
table_nodes = 301
"""


def test_load_shipped_config():
    config = load_config(CONFIGS / "uniform.ini")
    assert config.gas.gamma == 1.4
    assert config.gas.profile == "uniform"
    assert config.nozzle.preset == "mirrored-exponential"
    assert config.schedule.stages == ((5.0, 5.0), (8.0, 6.0), (12.0, 8.0))
    assert config.output.stations == (2.0, 7.0)
    assert config.numerics.seed == 7
    assert config.lam_bracket is None


def test_defaults_fill_missing_sections():
    config = parse_config(MINIMAL)
    assert config.numerics.epsilon == 0.1
    assert config.numerics.table_nodes == 301
    assert config.nozzle.hbar == 1.5
    assert config.with_pbar(3.0).gas.pbar == 3.0
    assert config.with_seed(11).numerics.seed == 11


def test_missing_gamma_names_the_section_line():
    with pytest.raises(ConfigurationError) as info:
        parse_config("# run\n[gas]\npbar = 2.0\n")
    assert info.value.key == "gas.gamma"
    assert info.value.line == 2


def test_unknown_key_position():
    with pytest.raises(ConfigurationError) as info:
        parse_config("[gas]\ngamma = 1.4\npbar = 2\ncolour = red\n")
    assert info.value.key == "gas.colour"
    assert info.value.line == 4
    assert info.value.column == 10


def test_invalid_value():
    with pytest.raises(ConfigurationError) as info:
        parse_config("[gas]\ngamma = abc\npbar = 2\n")
    assert info.value.key == "gas.gamma"
    assert info.value.line == 2


def test_epsilon_out_of_range():
    with pytest.raises(ConfigurationError) as info:
        parse_config(MINIMAL + "epsilon = 0.5\n")
    assert info.value.key == "numerics.epsilon"
    assert info.value.line == 7


@pytest.mark.parametrize(
    "text",
    [
        "gamma = 1.4\n[gas]\npbar = 2\n",
        "[gas]\ngamma = 1.4\ngamma = 1.3\npbar = 2\n",
        "[gas]\ngamma = 1.4\npbar = 2\n[extra]\nflag = 1\n",
        "[gas]\ngamma = 1.4\npbar = 2\n[schedule]\nstages = 8:6, 5:5\n",
        "[gas]\ngamma = 1.4\npbar = 2\nprofile = parabolic\n",
        "[gas]\ngamma = 1.4\npbar = 2\nprofile = file\n",
    ],
)
def test_rejected_configs(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_profile_presets():
    rho, u = profile_preset("linear-velocity", 1.0)
    assert float(u(0.5)) == 1.5
    assert float(rho(0.5)) == 1.0
    rho, u = profile_preset("smooth-shear", 1.5)
    assert float(u(0.0)) == 1.0
    assert float(u(1.5)) == 1.0
    assert float(rho(0.0)) == pytest.approx(1.1)
    assert float(u.derivative(0.0)) == 0.0
    with pytest.raises(ConfigurationError):
        profile_preset("parabolic", 1.0)


def test_read_two_column(tmp_path):
    path = tmp_path / "rho.txt"
    path.write_text("# x2 rho\n0.0 1.0\n1.5 1.0  # top\n", encoding="utf-8")
    frame = read_two_column(path, ("x2", "rho"))
    assert list(frame.columns) == ["x2", "rho"]
    assert frame["x2"].tolist() == [0.0, 1.5]

    path.write_text("0.0 1.0\n1.5 oops\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        read_two_column(path)
    path.write_text("0.0 1.0\n", encoding="utf-8")
    with pytest.raises(ConfigurationError):
        read_two_column(path)


def test_sampled_profiles_next_to_config(tmp_path):
    for name in ("rho.txt", "u.txt"):
        (tmp_path / name).write_text("0.0 1.0\n0.75 1.0\n1.5 1.0\n", encoding="utf-8")
    path = tmp_path / "run.ini"
    path.write_text(
        "[gas]\ngamma = 1.4\npbar = 2.0\nprofile = file\nrho_file = rho.txt\nu_file = u.txt\n",
        encoding="utf-8",
    )
    model = build_model(load_config(path))
    assert model.Q == pytest.approx(1.5, rel=1e-12)


def test_problem_assembly():
    config = parse_config(MINIMAL)
    problem = build_problem(config)
    assert problem.table.Q == pytest.approx(1.5, rel=1e-12)
    assert problem.h == 0.1
    assert problem.schedule == [(5.0, 5.0), (8.0, 6.0), (12.0, 8.0)]
    assert problem.nozzle.kind == "mirrored-exponential"
    assert pbar_threshold(config) == pytest.approx(1.0 / 1.4)
    assert build_model(config, pbar=3.0).pbar == 3.0


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.ini")
