import math

import pytest

from app import create_app
from Services.persist import CampaignManifest, write_table


@pytest.fixture
def results(tmp_path):
    manifest = CampaignManifest(directory=tmp_path / "case1", kind="optimize-lbfgs", config={}, config_hash="f00d")
    history = write_table(
        manifest.directory / "history.csv",
        [{"k": 0, "J": 2.0, "J_over_J0": 1.0}, {"k": 1, "J": 1.0, "J_over_J0": 0.5}],
    )
    manifest.add("history", history)
    manifest.counters.update(J_over_J0=0.5, onset_initial=math.nan)
    manifest.write("completed")

    sweep = CampaignManifest(directory=tmp_path / "sweep" / "Ra1e+04", kind="forward", config={}, config_hash="beef")
    sweep.add("diagnostics", write_table(sweep.directory / "diagnostics.csv", [{"t": 0.0, "h_bar": math.nan}]))
    sweep.write("completed")
    return tmp_path


@pytest.fixture
def client(results):
    app = create_app(results)
    app.config.update(TESTING=True)
    return app.test_client()


def test_health(client, results):
    body = client.get("/api/health").get_json()
    assert body["status"] == "ok"
    assert body["results_present"] is True
    assert body["results_dir"] == str(results.resolve())


def test_list_campaigns(client):
    names = {c["name"]: c for c in client.get("/api/campaigns").get_json()["campaigns"]}
    assert set(names) == {"case1", "sweep/Ra1e+04"}
    assert names["case1"]["kind"] == "optimize-lbfgs"
    only = client.get("/api/campaigns?kind=optimize").get_json()["campaigns"]
    assert [c["name"] for c in only] == ["case1"]


def test_campaign_detail(client):
    body = client.get("/api/campaigns/case1").get_json()
    assert body["status"] == "completed"
    assert body["counters"]["onset_initial"] is None
    assert client.get("/api/campaigns/sweep/Ra1e+04").get_json()["kind"] == "forward"
    assert client.get("/api/campaigns/nope").status_code == 404


def test_campaign_series(client):
    body = client.get("/api/campaigns/case1/series/history.csv").get_json()
    assert body["columns"] == ["k", "J", "J_over_J0"]
    assert [row["J"] for row in body["rows"]] == [2.0, 1.0]

    picked = client.get("/api/campaigns/case1/series/history.csv?columns=k,J_over_J0").get_json()
    assert picked["columns"] == ["k", "J_over_J0"]

    nan_row = client.get("/api/campaigns/sweep/Ra1e+04/series/diagnostics.csv").get_json()["rows"][0]
    assert nan_row["h_bar"] is None


def test_series_errors(client):
    assert client.get("/api/campaigns/case1/series/manifest.json").status_code == 400
    assert client.get("/api/campaigns/case1/series/history.csv?columns=grad").status_code == 400
    assert client.get("/api/campaigns/case1/series/missing.csv").status_code == 404
    assert client.get("/api/campaigns/nope/series/history.csv").status_code == 404


def test_file_download(client):
    response = client.get("/api/files/case1/history.csv")
    assert response.status_code == 200
    assert response.data.startswith(b"k,J,J_over_J0")
    assert client.get("/api/files/case1/absent.csv").status_code == 404
    assert client.get("/api/files/../outside.txt").status_code == 404
