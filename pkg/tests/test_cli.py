import pytest
from click.testing import CliRunner

from app.cli import EXIT_INPUT, cli
from Services.persist import read_manifest, read_table, verify_manifest

TINY = """
[run]
name = tiny

[physics]
Ra = 0
h0 = 0.3

[grid]
ny = 16
aspect_ratio = 0.5

[time]
dt = {dt}
t_final = 0.005

[control]
basis = tanh_basis
coefficients = 0.5, 0.0

[output]
snapshot_every = 2
"""


@pytest.fixture
def runner():
    return CliRunner()


def _config(tmp_path, dt="1e-3"):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY.format(dt=dt), encoding="utf-8")
    return path


def test_missing_config_is_an_input_error(runner, tmp_path):
    result = runner.invoke(cli, ["--no-progress", "forward", "--config", str(tmp_path / "absent.ini")])
    assert result.exit_code == EXIT_INPUT


def test_invalid_time_step_is_an_input_error(runner, tmp_path):
    result = runner.invoke(cli, ["forward", "--config", str(_config(tmp_path, dt="0")), "--out", str(tmp_path)])
    assert result.exit_code == EXIT_INPUT
    assert not (tmp_path / "tiny").exists()


def test_forward_campaign(runner, tmp_path):
    out = tmp_path / "results"
    result = runner.invoke(cli, ["--no-progress", "forward", "--config", str(_config(tmp_path)), "--out", str(out)])
    assert result.exit_code == 0, result.output
    directory = out / "tiny"
    manifest = read_manifest(directory)
    assert manifest["status"] == "completed"
    assert manifest["kind"] == "forward"
    assert manifest["counters"]["steps"] == 5
    assert "snapshot:T:4" in manifest["artifacts"] and "snapshot:phi:5" in manifest["artifacts"]
    assert verify_manifest(directory) == []
    diagnostics = read_table(directory / "diagnostics.csv")
    assert len(diagnostics) == 6
    assert diagnostics["h_bar"].iloc[-1] > diagnostics["h_bar"].iloc[0]

    result = runner.invoke(cli, ["plotdata", str(directory)])
    assert result.exit_code == 0, result.output
    series = read_table(directory / "plotdata" / "series.csv")
    assert list(series.columns) == ["series", "x", "y"]
    assert "h_bar" in set(series["series"])


def test_seed_and_profile_reach_the_config(runner, tmp_path, monkeypatch):
    seen = {}

    def fake_forward(cfg, progress=False):
        seen["cfg"] = cfg
        raise FileNotFoundError("stop here")

    monkeypatch.setattr("app.cli.cmd_forward", fake_forward)
    result = runner.invoke(cli, ["forward", "--config", str(_config(tmp_path)), "--seed", "42", "--profile", "desk"])
    assert result.exit_code == EXIT_INPUT
    assert seen["cfg"].run.seed == 42
    assert seen["cfg"].grid.ny == 32


def test_plotdata_without_manifest(runner, tmp_path):
    result = runner.invoke(cli, ["plotdata", str(tmp_path)])
    assert result.exit_code == EXIT_INPUT


def test_paper_profile_uses_the_full_grid(runner, tmp_path, monkeypatch):
    seen = {}

    def fake_forward(cfg, progress=False):
        seen["cfg"] = cfg
        raise FileNotFoundError("stop here")

    monkeypatch.setattr("app.cli.cmd_forward", fake_forward)
    result = runner.invoke(cli, ["forward", "--config", str(_config(tmp_path)), "--profile", "paper"])
    assert result.exit_code == EXIT_INPUT
    grid = seen["cfg"].make_grid()
    assert grid.shape == (256, 64)
    assert seen["cfg"].time.t_final == pytest.approx(0.4)


def test_gradcheck_campaign(runner, tmp_path):
    path = _config(tmp_path)
    path.write_text(path.read_text(encoding="utf-8") + "\n[target]\ncoefficients = 0.3, 2.0\n", encoding="utf-8")
    out = tmp_path / "results"
    result = runner.invoke(cli, ["--no-progress", "gradcheck", "--config", str(path), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "cosine similarity" in result.output
    directory = out / "tiny"
    manifest = read_manifest(directory)
    assert manifest["kind"] == "gradcheck"
    assert manifest["status"] == "completed"
    assert verify_manifest(directory) == []
    gradient = read_table(directory / "gradient.csv")
    assert list(gradient.columns) == ["index", "adjoint", "fd", "relative_error"]
    assert len(gradient) == 2
    assert manifest["counters"]["cosine_similarity"] > 0.99
    assert manifest["counters"]["j_calls"] >= 5
