import pytest

from Models.config import PROFILES, build_config, load_config, read_sections
from Services.errors import ConfigError


def _write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults():
    cfg = build_config({})
    assert cfg.grid.nx == 128
    assert cfg.make_grid().shape == (128, 32)
    assert cfg.physical_params().Ra == pytest.approx(1e5)
    assert cfg.initial_coefficients() == [-0.1, 0.0]
    assert cfg.pso_bounds() == ([-1.0, -1.0], [0.0, 0.0])
    assert cfg.sweep.Ra == [1e4, 4e4, 8e4, 1e5]
    assert cfg.adjoint_options().walls == "transpose"


def test_nx_is_derived_and_checked():
    assert build_config({"grid": {"ny": "16", "aspect_ratio": "2"}}).grid.nx == 32
    with pytest.raises(ConfigError):
        build_config({"grid": {"nx": "30", "ny": "16", "aspect_ratio": "2"}})
    with pytest.raises(ConfigError):
        build_config({"grid": {"ny": "10", "aspect_ratio": "0.25"}})


def test_unknown_keys_and_sections_are_rejected():
    with pytest.raises(ConfigError):
        build_config({"physics": {"Rayleigh": "1e5"}})
    with pytest.raises(ConfigError):
        build_config({"solver": {"tol": "1"}})


def test_invalid_values_are_rejected():
    with pytest.raises(ConfigError):
        build_config({"time": {"dt": "0"}})
    with pytest.raises(ConfigError):
        build_config({"physics": {"T_b": "-1"}})
    with pytest.raises(ConfigError):
        build_config({"target": {"coefficients": "0.3,2", "constant": "-1"}})
    with pytest.raises(ConfigError):
        build_config({"target": {"constant": "0.5"}})
    with pytest.raises(ConfigError):
        build_config({"control": {"coefficients": "1,2,3"}}).initial_coefficients()


def test_ini_file_with_lists_and_comments(tmp_path):
    path = _write(
        tmp_path,
        "[control]\n"
        "basis = trig_power_basis\n"
        "coefficients = 0, 0, 0, 0, 0, 0, 0, -0.5  # cosine^4 only\n"
        "[pso]\n"
        "lower = -1,-1,-1,-1,-1,-1,-1,-1\n"
        "upper = 1,1,1,1,1,1,1,1\n"
        "[target]\n"
        "constant = -1\n",
    )
    cfg = load_config(path)
    assert cfg.make_basis().dimension == 8
    assert cfg.initial_coefficients()[-1] == pytest.approx(-0.5)
    assert cfg.pso_bounds()[1] == [1.0] * 8
    assert cfg.target.defined and not cfg.desired.defined


def test_profile_overlay_and_overrides(tmp_path):
    path = _write(tmp_path, "[grid]\nny = 16\naspect_ratio = 1\n[run]\nprofile = paper\n")
    cfg = load_config(path)
    assert cfg.grid.ny == PROFILES["paper"]["grid"]["ny"]
    assert cfg.time.dt == pytest.approx(2.5e-5)

    cfg = load_config(path, profile="desk", overrides={"run": {"seed": 7}, "output": {"directory": None}})
    assert cfg.run.profile == "desk"
    assert cfg.grid.ny == 32
    assert cfg.run.seed == 7
    assert cfg.output.directory == "results"
    with pytest.raises(ConfigError):
        load_config(path, profile="laptop")


def test_config_hash_is_stable():
    a = build_config({"physics": {"Ra": "1e4"}})
    b = build_config({"physics": {"Ra": "10000.0"}})
    c = build_config({"physics": {"Ra": "2e4"}})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 64


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        read_sections(tmp_path / "absent.ini")
    with pytest.raises(ConfigError):
        read_sections(_write(tmp_path, "no section header\n", "bad.ini"))


def test_shipped_configs_load():
    for name in ("case1", "case2", "forward_ra1e4", "forward_ra1e5", "sweep", "stefan1d", "gradcheck"):
        cfg = load_config(f"configs/{name}.ini")
        cfg.make_grid()
        cfg.initial_coefficients()
