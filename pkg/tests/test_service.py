import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from roadprompt.model import BackboneSpec, build_model
from roadprompt.service import create_app


@pytest.fixture(scope="module")
def model():
    return build_model(BackboneSpec(), seed=2)


@pytest.fixture()
def client(model):
    model.encode_calls = 0
    app = create_app(model, patch_size=(32, 32))
    with TestClient(app) as c:
        yield c


def _png_bytes(rng, h=64, w=64):
    image = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG")
    return buf.getvalue()


def _decode_mask(b64: str) -> np.ndarray:
    raw = base64.b64decode(b64)
    return np.asarray(Image.open(io.BytesIO(raw)))


def _create(client, rng, h=64, w=64):
    resp = client.post("/sessions", files={"image": ("img.png", _png_bytes(rng, h, w), "image/png")})
    assert resp.status_code == 200, resp.text
    return resp.json()


def test_healthz(client):
    resp = client.get("/healthz")
    assert resp.status_code == 200
    assert resp.json()["status"] == "ok"


def test_create_session_contract(client, rng):
    body = _create(client, rng)
    assert set(body["masks"]) == {"auto", "highrecall", "stage2", "stage3", "final"}
    grid = body["patch_grid"]
    assert grid == {"l_h": 32, "l_w": 32, "rows": 2, "cols": 2, "height": 64, "width": 64}
    for name in ("auto", "highrecall"):
        mask = _decode_mask(body["masks"][name])
        assert mask.shape == (64, 64)
        assert set(np.unique(mask)) <= {0, 255}


def test_same_image_two_independent_sessions(client, rng):
    seed_rng = np.random.default_rng(7)
    payload = _png_bytes(seed_rng)
    a = client.post("/sessions", files={"image": ("a.png", payload, "image/png")}).json()
    b = client.post("/sessions", files={"image": ("b.png", payload, "image/png")}).json()
    assert a["id"] != b["id"]
    assert a["masks"] == b["masks"]


def test_corrupt_payload_creates_no_session(client, model):
    before = client.get("/healthz").json()["sessions"]
    resp = client.post("/sessions", files={"image": ("x.png", b"not a png", "image/png")})
    assert resp.status_code == 400
    assert client.get("/healthz").json()["sessions"] == before


def test_oversized_image_rejected(model, rng):
    app = create_app(model, max_image_side=32)
    with TestClient(app) as client:
        resp = client.post("/sessions", files={"image": ("x.png", _png_bytes(rng, 64, 64), "image/png")})
        assert resp.status_code == 400
        assert "exceeds" in resp.json()["detail"]


def test_refine_affected_patches_and_empty_delta(client, rng):
    body = _create(client, rng)
    sid = body["id"]
    resp = client.post(f"/sessions/{sid}/refine", json={"negatives": [[40, 40]]})
    assert resp.status_code == 200
    out = resp.json()
    assert out["affected_patches"] == [
        {"i": 1, "j": 1, "row0": 32, "row1": 64, "col0": 32, "col1": 64}
    ]
    # empty delta changes nothing
    again = client.post(f"/sessions/{sid}/refine", json={}).json()
    assert again["masks"] == out["masks"]
    assert again["affected_patches"] == []


def test_refine_validation(client, rng):
    sid = _create(client, rng)["id"]
    resp = client.post(f"/sessions/{sid}/refine", json={"positives": [[99, 0]]})
    assert resp.status_code == 400
    assert "h=99" in resp.json()["detail"]
    resp = client.post(f"/sessions/{sid}/refine", json={"strategy": "blend"})
    assert resp.status_code == 400
    resp = client.post("/sessions/nope/refine", json={})
    assert resp.status_code == 404


def test_undo_replay_restores_masks(client, rng):
    body = _create(client, rng)
    sid = body["id"]
    first = client.post(f"/sessions/{sid}/refine", json={"negatives": [[10, 10]]}).json()
    second = client.post(
        f"/sessions/{sid}/refine", json={"positives": [[50, 50]], "negatives": [[40, 8]]}
    ).json()
    assert second["history_length"] == 2
    undone = client.post(f"/sessions/{sid}/undo").json()
    assert undone["noop"] is False
    assert undone["masks"] == first["masks"]
    undone = client.post(f"/sessions/{sid}/undo").json()
    assert undone["masks"] == body["masks"]
    noop = client.post(f"/sessions/{sid}/undo").json()
    assert noop["noop"] is True and noop["history_length"] == 0
    assert noop["masks"] == body["masks"]


def test_reset_flag_replaces_history(client, rng):
    sid = _create(client, rng)["id"]
    client.post(f"/sessions/{sid}/refine", json={"negatives": [[10, 10]]})
    replaced = client.post(
        f"/sessions/{sid}/refine", json={"negatives": [[40, 40]], "reset": True}
    ).json()
    assert replaced["history_length"] == 1
    fresh = client.post(f"/sessions/{sid}/refine", json={"reset": True}).json()
    assert fresh["history_length"] == 1  # reset then append the (empty) delta


def test_get_mask_roundtrip_and_errors(client, rng):
    body = _create(client, rng)
    sid = body["id"]
    resp = client.get(f"/sessions/{sid}/masks/final")
    assert resp.status_code == 200
    assert resp.headers["content-type"] == "image/png"
    served = np.asarray(Image.open(io.BytesIO(resp.content)))
    assert (served == _decode_mask(body["masks"]["final"])).all()
    # reads are idempotent
    assert client.get(f"/sessions/{sid}/masks/final").content == resp.content
    assert client.get(f"/sessions/{sid}/masks/imaginary").status_code == 400
    assert client.get("/sessions/ghost/masks/final").status_code == 404


def test_final_equals_auto_before_prompts_under_sum(client, rng):
    body = _create(client, rng)
    assert body["masks"]["final"] == body["masks"]["auto"]


def test_encoder_once_across_20_step_sequence(model, rng):
    app = create_app(model, patch_size=(32, 32))
    with TestClient(app) as client:
        model.encode_calls = 0
        sid = _create(client, rng)["id"]
        assert model.encode_calls == 1
        step_rng = np.random.default_rng(0)
        for step in range(20):
            kind = step % 3
            if kind == 0:
                client.post(
                    f"/sessions/{sid}/refine",
                    json={"positives": [[int(step_rng.integers(64)), int(step_rng.integers(64))]]},
                )
            elif kind == 1:
                client.post(f"/sessions/{sid}/undo")
            else:
                client.get(f"/sessions/{sid}/masks/stage2")
        assert model.encode_calls == 1


def test_session_isolation(client, rng):
    a = _create(client, rng)
    b = _create(client, rng)
    before_b = client.get(f"/sessions/{b['id']}/masks/final").content
    client.post(f"/sessions/{a['id']}/refine", json={"negatives": [[5, 5]], "positives": [[40, 40]]})
    after_b = client.get(f"/sessions/{b['id']}/masks/final").content
    assert before_b == after_b
    # and the refined session did change state
    assert client.post(f"/sessions/{a['id']}/undo").json()["history_length"] == 0


def test_session_expiry(model, rng, monkeypatch):
    app = create_app(model, session_timeout=0.0)
    with TestClient(app) as client:
        sid = _create(client, rng)["id"]
        import time

        time.sleep(0.01)
        assert client.get(f"/sessions/{sid}/masks/final").status_code == 404
