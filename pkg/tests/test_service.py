import json
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from alcore.service import create_app

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app())


def payload(values):
    arr = np.asarray(values, dtype=float)
    return {"dims": list(arr.shape), "values": arr.ravel().tolist()}


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json()["status"] == "ok"


def test_score_margins(client):
    half = payload(np.full((2, 2, 2), 0.5))
    sure = payload(np.zeros((2, 2, 2)))
    r = client.post(
        "/score",
        json={
            "method": "margins",
            "items": [
                {"item_id": "confident", "maps": [sure]},
                {"item_id": "uncertain", "maps": [half]},
            ],
        },
    )
    assert r.status_code == 200
    body = r.json()
    assert body["ranking"] == ["uncertain", "confident"]
    assert body["scores"][0]["score"] == 0.0
    assert body["scores"][1]["score"] == -0.5


def test_score_dropout_equals_bootstrap_at_full_fraction(client, rng):
    maps = [payload(rng.random((3, 3, 3))) for _ in range(4)]
    items = [{"item_id": "a", "maps": maps}]
    drop = client.post(
        "/score", json={"method": "dropout", "items": items, "top_fraction": 1.0}
    ).json()
    boot = client.post("/score", json={"method": "bootstrap", "items": items}).json()
    assert drop["scores"][0]["score"] == pytest.approx(
        boot["scores"][0]["score"], abs=1e-12
    )


def test_score_domain_error_maps_to_400(client):
    bad = payload(np.full((2, 2, 2), 1.5))  # not a probability map
    r = client.post(
        "/score", json={"method": "margins", "items": [{"item_id": "a", "maps": [bad]}]}
    )
    assert r.status_code == 400
    assert "[0, 1]" in r.json()["detail"]


def test_score_malformed_body_is_422(client):
    r = client.post("/score", json={"method": "margins"})
    assert r.status_code == 422


def test_select_topk(client):
    scores = [
        {"item_id": f"i{k}", "method": "dropout", "score": k / 10.0, "n_predictions": 2}
        for k in range(5)
    ]
    r = client.post(
        "/select", json={"strategy": "topk", "m": 2, "scores": scores}
    )
    assert r.status_code == 200
    assert r.json()["chosen"] == ["i4", "i3"]


def test_select_representative_matches_cli_golden(client):
    # same fixture inputs as the CLI golden: identical selection
    scores = []
    for line in (DATA / "select_scores.csv").read_text().splitlines()[1:]:
        item_id, method, score, n = line.split(",")
        scores.append(
            {"item_id": item_id, "method": method, "score": float(score),
             "n_predictions": int(n)}
        )
    features = []
    for line in (DATA / "select_features.csv").read_text().splitlines()[1:]:
        parts = line.split(",")
        features.append({"item_id": parts[0], "values": [float(x) for x in parts[1:]]})
    r = client.post(
        "/select",
        json={"strategy": "representative", "m": 3, "k": 5, "seed": 7,
              "scores": scores, "features": features},
    )
    assert r.status_code == 200
    golden = json.loads((DATA / "golden_representative.json").read_text())
    assert r.json() == golden


def test_select_missing_inputs_400(client):
    r = client.post("/select", json={"strategy": "topk", "m": 2})
    assert r.status_code == 400


def test_init_diverse_matches_cli_golden(client):
    rows = []
    for line in (DATA / "init_features.csv").read_text().splitlines()[1:]:
        item_id, mean, median, entropy, energy = line.split(",")
        rows.append(
            {"item_id": item_id, "mean": float(mean), "median": float(median),
             "entropy": float(entropy), "energy": float(energy)}
        )
    r = client.post(
        "/init", json={"mode": "diverse", "n": 4, "seed": 3, "features": rows}
    )
    assert r.status_code == 200
    golden = json.loads((DATA / "golden_init_diverse.json").read_text())
    assert r.json() == golden


def test_features_endpoint(client, rng):
    vol = rng.random((3, 3, 3))
    r = client.post(
        "/features",
        json={"items": [{"item_id": "a", "volume": payload(vol)}], "bins": 8},
    )
    assert r.status_code == 200
    row = r.json()["rows"][0]
    assert row["mean"] == pytest.approx(float(vol.mean()), abs=1e-12)
    assert row["energy"] == pytest.approx(float((vol**2).sum()), rel=1e-12)


def test_dice_endpoint(client):
    pred = np.zeros((1, 1, 4))
    truth = np.zeros((1, 1, 4))
    pred[0, 0, [0, 1]] = 1.0
    truth[0, 0, [1, 2]] = 1.0
    r = client.post(
        "/dice",
        json={"pairs": [{"item_id": "a", "pred": payload(pred), "truth": payload(truth)}]},
    )
    assert r.status_code == 200
    assert r.json()["scores"][0]["value"] == 0.5
    assert r.json()["mean"] == 0.5


def test_simulate_endpoint_matches_direct_run(client):
    config = json.loads((DATA / "simulate_config.json").read_text())
    r = client.post("/simulate", json={"config": config})
    assert r.status_code == 200
    body = r.json()
    golden = json.loads((DATA / "golden_simulate_chosen.json").read_text())
    assert [rec["selection"]["chosen"] for rec in body["records"]] == golden


def test_simulate_config_errors_400_with_fields(client):
    r = client.post("/simulate", json={"config": {"pool_size": "x", "bogus": 1}})
    assert r.status_code == 400
    detail = r.json()["detail"]
    assert any("pool_size" in e for e in detail)
    assert any("bogus" in e for e in detail)


def test_compare_endpoint(client):
    config = json.loads((DATA / "simulate_config.json").read_text())
    config["iterations"] = 1
    other = dict(config)
    other["strategy"] = "random"
    r = client.post(
        "/compare",
        json={"configs": [config, other], "repeats": 1, "dice_target": 0.5},
    )
    assert r.status_code == 200
    body = r.json()
    assert set(body["labels"]) == {"topk", "random"}
    assert "fraction_to_target" in body
