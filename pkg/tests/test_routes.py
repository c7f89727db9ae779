from io import BytesIO

import pytest
from openpyxl import load_workbook

EXPERIMENT = {
    "fixture": "mqp-rhs",
    "name": "api-run",
    "estimator": "oracle",
    "resolution": 0.5,
    "N": [3],
    "K": [3],
    "repetitions": 2,
    "noise": {"kind": "none"},
    "seed": 1,
}


@pytest.fixture
def stored_run(client):
    response = client.post("/api/v1/experiments", json=EXPERIMENT)
    assert response.status_code == 201
    return response.get_json()


def test_forward_returns_front(client):
    response = client.post("/api/v1/forward", json={"fixture": "example1", "K": 3})
    assert response.status_code == 200
    body = response.get_json()
    assert body["name"] == "example1"
    assert len(body["front"]["points"]) == 3
    assert body["labels"][0] == "c1_1"


def test_unknown_fixture_is_not_found(client):
    response = client.post("/api/v1/forward", json={"fixture": "nope"})
    assert response.status_code == 404
    error = response.get_json()["error"]
    assert error["code"] == "NOT_FOUND"
    assert "nope" in error["message"]
    assert "known" in error["details"]


def test_invalid_input_uses_the_error_envelope(client):
    response = client.post("/api/v1/forward", json={"fixture": "mqp-rhs", "theta": [0.0, 0.0]})
    assert response.status_code == 400
    assert response.get_json()["error"]["code"] == "VALIDATION_ERROR"

    response = client.post("/api/v1/forward", json=[1, 2])
    assert response.status_code == 400


def test_estimate_endpoint(client):
    response = client.post("/api/v1/estimates", json={
        "fixture": "mqp-rhs", "estimator": "oracle", "resolution": 0.5, "N": [3], "K": [3],
        "noise": {"kind": "none"}, "seed": 2,
    })
    assert response.status_code == 200
    body = response.get_json()
    assert body["estimator"] == "oracle"
    assert body["estimate"]["labels"] == ["b1", "b2"]
    assert body["loss"]["N"] == 3


def test_identifiability_endpoint(client):
    response = client.post("/api/v1/estimates/identifiability", json={
        "fixture": "intro-biobj", "N_prime": 11, "K_prime": 11, "search": {"rounds": 1, "random_directions": 2},
    })
    assert response.status_code == 200
    assert response.get_json()["non_identifiable"] is True


def test_model_export_is_an_lp_attachment(client):
    response = client.post("/api/v1/models/export", json={"fixture": "mqp-rhs", "N": 2, "K": 2})
    assert response.status_code == 200
    assert "attachment" in response.headers["Content-Disposition"]
    assert "mqp-rhs_2_2.lp" in response.headers["Content-Disposition"]
    text = response.get_data(as_text=True)
    assert text.startswith("\\ model: mqp-rhs_2_2")
    assert text.rstrip().endswith("End")


def test_model_export_rejects_unknown_builder(client):
    response = client.post("/api/v1/models/export", json={"fixture": "mqp-rhs", "builder": "cubic"})
    assert response.status_code == 400


def test_experiment_is_stored_with_repetitions(stored_run):
    assert stored_run["name"] == "api-run"
    assert stored_run["status"] == "completed"
    assert len(stored_run["repetitions"]) == 2
    assert [r["seed"] for r in stored_run["repetitions"]] == [1, 2]
    assert stored_run["summary"]["aggregates"][0]["repetitions"] == 2


def test_experiment_listing_and_lookup(client, stored_run):
    listing = client.get("/api/v1/experiments?fixture=mqp-rhs").get_json()
    assert listing["total"] == 1
    assert listing["data"][0]["id"] == stored_run["id"]
    assert client.get("/api/v1/experiments?fixture=traffic").get_json()["total"] == 0

    response = client.get(f"/api/v1/experiments/{stored_run['id']}")
    assert response.status_code == 200
    assert response.get_json()["config"]["resolution"] == 0.5


def test_experiment_downloads(client, stored_run):
    response = client.get(f"/api/v1/experiments/{stored_run['id']}/download/csv")
    assert response.status_code == 200
    lines = response.get_data(as_text=True).strip().splitlines()
    assert lines[0].startswith("name,fixture,estimator,N,K")
    assert len(lines) == 3

    response = client.get(f"/api/v1/experiments/{stored_run['id']}/download/excel")
    assert response.status_code == 200
    book = load_workbook(BytesIO(response.data))
    assert book.sheetnames == ["Repetitions", "Summary"]


def test_experiment_delete_then_not_found(client, stored_run):
    run_id = stored_run["id"]
    assert client.delete(f"/api/v1/experiments/{run_id}").status_code == 200
    response = client.get(f"/api/v1/experiments/{run_id}")
    assert response.status_code == 404
    assert response.get_json()["error"]["code"] == "NOT_FOUND"


def test_experiment_with_bad_config_is_rejected(client):
    response = client.post("/api/v1/experiments", json={"fixture": "mqp-rhs", "estimator": "em"})
    assert response.status_code == 400
