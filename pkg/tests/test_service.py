"""Annotation service: run recording, session lifecycle, mark-to-reward
mapping, websocket streaming, and the retraining job state machine."""

import base64
import io
import math
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from ptrack.service import ServiceSettings, build_app, merge_marks

EPISODE = {"preset": "short_term", "episode_len": 120, "seed": 11}
FAST = 1e9  # speed multiplier high enough that streaming never sleeps


@pytest.fixture()
def client():
    app = build_app(ServiceSettings(stride=40, retrain_updates=4,
                                    retrain_batch_size=2))
    with TestClient(app) as c:
        yield c


def _make_run(client, episode=EPISODE, **kw):
    body = {"v": 1, "episode": episode, **kw}
    resp = client.post("/v1/runs", json=body)
    assert resp.status_code == 200, resp.text
    return resp.json()


def _make_session(client, run, speed=FAST):
    resp = client.post("/v1/session", json={
        "v": 1, "episode_id": run["episode_id"], "run_id": run["run_id"],
        "speed": speed})
    assert resp.status_code == 200, resp.text
    return resp.json()


# -------------------------------------------------------------------- marks

def test_merge_marks_union():
    assert merge_marks([(5, 10), (8, 20)]) == [(5, 20)]
    assert merge_marks([(8, 20), (5, 10)]) == [(5, 20)]
    assert merge_marks([(1, 2), (4, 5)]) == [(1, 2), (4, 5)]
    assert merge_marks([(1, 2), (3, 5)]) == [(1, 5)]  # adjacent closed ranges
    assert merge_marks([]) == []


# --------------------------------------------------------------- run + refs

def test_create_run_reports_shape(client):
    run = _make_run(client)
    assert run["v"] == 1
    assert run["frames"] == 120
    assert run["stride"] == 40
    assert run["run_id"].startswith("run-")
    listing = client.get("/v1/runs").json()
    assert [r["run_id"] for r in listing["runs"]] == [run["run_id"]]


def test_session_unknown_refs_404(client):
    run = _make_run(client)
    resp = client.post("/v1/session", json={
        "v": 1, "episode_id": run["episode_id"], "run_id": "run-nope"})
    assert resp.status_code == 404
    resp = client.post("/v1/session", json={
        "v": 1, "episode_id": "sim-999", "run_id": run["run_id"]})
    assert resp.status_code == 404


def test_session_rejects_nonpositive_speed(client):
    run = _make_run(client)
    resp = client.post("/v1/session", json={
        "v": 1, "episode_id": run["episode_id"], "run_id": run["run_id"],
        "speed": 0})
    assert resp.status_code == 422


# -------------------------------------------------------- marks and commits

def test_marks_merge_and_commit_rewards(client):
    run = _make_run(client)
    sess = _make_session(client, run)
    sid = sess["session_id"]
    resp = client.post(f"/v1/session/{sid}/marks",
                       json={"v": 1, "marks": [[5, 10]]})
    assert resp.json()["marks"] == [[5, 10]]
    resp = client.post(f"/v1/session/{sid}/marks",
                       json={"v": 1, "marks": [[8, 20], [50, 60]]})
    assert resp.json()["marks"] == [[5, 20], [50, 60]]

    resp = client.post(f"/v1/session/{sid}/commit")
    body = resp.json()
    # 120 frames at stride 40 -> ceil(120/40) = 3 tuples.
    assert body["tuples_appended"] == 3
    assert body["replay_size"] == 3


def test_commit_reward_semantics_against_marks(client):
    # Stride frames are 0, 40, 80; a mark covering [40, 41] zeroes frame 40.
    run = _make_run(client)
    sess = _make_session(client, run)
    sid = sess["session_id"]
    client.post(f"/v1/session/{sid}/marks",
                json={"v": 1, "marks": [[40, 41]]})
    client.post(f"/v1/session/{sid}/commit")
    state = client.app.state.tracker
    rewards = {t.frame_index: t.reward for t in state.replay}
    assert rewards == {0: 1.0, 40: 0.0, 80: 1.0}


def test_no_marks_means_all_correct(client):
    run = _make_run(client)
    sess = _make_session(client, run)
    client.post(f"/v1/session/{sess['session_id']}/commit")
    state = client.app.state.tracker
    assert [t.reward for t in state.replay] == [1.0, 1.0, 1.0]


def test_mark_validation(client):
    run = _make_run(client)
    sid = _make_session(client, run)["session_id"]
    resp = client.post(f"/v1/session/{sid}/marks",
                       json={"v": 1, "marks": [[10, 5]]})
    assert resp.status_code == 422
    resp = client.post(f"/v1/session/{sid}/marks",
                       json={"v": 1, "marks": [[0, 500]]})
    assert resp.status_code == 422


def test_committed_session_is_immutable(client):
    run = _make_run(client)
    sid = _make_session(client, run)["session_id"]
    client.post(f"/v1/session/{sid}/commit")
    assert client.post(f"/v1/session/{sid}/commit").status_code == 409
    resp = client.post(f"/v1/session/{sid}/marks",
                       json={"v": 1, "marks": [[1, 2]]})
    assert resp.status_code == 409
    # The replay DB gained tuples exactly once.
    assert len(client.app.state.tracker.replay) == 3


# ----------------------------------------------------------------- training

def test_train_requires_data(client):
    resp = client.post("/v1/train", json={"v": 1})
    assert resp.status_code == 412


def test_train_job_state_machine(client):
    run = _make_run(client)
    sid = _make_session(client, run)["session_id"]
    client.post(f"/v1/session/{sid}/commit")
    trig = client.post("/v1/train", json={"v": 1})
    assert trig.status_code == 200
    job = trig.json()
    assert job["status"] == "queued"
    seen = {job["status"]}
    deadline = time.time() + 30
    while time.time() < deadline:
        status = client.get(f"/v1/train/{job['job_id']}").json()["status"]
        seen.add(status)
        if status in ("done", "failed"):
            break
        time.sleep(0.01)
    assert status == "done", seen
    assert "failed" not in seen
    assert client.get("/v1/train/job-nope").status_code == 404


def test_train_busy_rejects_concurrent_trigger():
    app = build_app(ServiceSettings(stride=40, retrain_updates=4000,
                                    retrain_batch_size=2))
    with TestClient(app) as client:
        run = _make_run(client)
        sid = _make_session(client, run)["session_id"]
        client.post(f"/v1/session/{sid}/commit")
        first = client.post("/v1/train", json={"v": 1})
        assert first.status_code == 200
        second = client.post("/v1/train", json={"v": 1})
        assert second.status_code == 409
        deadline = time.time() + 60
        while time.time() < deadline:
            status = client.get(
                f"/v1/train/{first.json()['job_id']}").json()["status"]
            if status in ("done", "failed"):
                break
            time.sleep(0.05)
        assert status == "done"


def test_retrain_updates_the_served_net(client):
    run = _make_run(client)
    sid = _make_session(client, run)["session_id"]
    client.post(f"/v1/session/{sid}/commit")
    state = client.app.state.tracker
    before = {k: v.copy() for k, v in state.net.params.items()}
    job = client.post("/v1/train", json={"v": 1}).json()
    deadline = time.time() + 30
    while time.time() < deadline:
        if client.get(f"/v1/train/{job['job_id']}").json()["status"] == "done":
            break
        time.sleep(0.01)
    changed = any(not np.array_equal(before[k], state.net.params[k])
                  for k in before)
    assert changed


# ---------------------------------------------------------------- websocket

def test_stream_frames_then_mark_and_commit(client):
    run = _make_run(client, episode={**EPISODE, "episode_len": 90},
                    stride=30)
    sid = _make_session(client, run)["session_id"]
    frames = []
    with client.websocket_connect(f"/v1/session/{sid}/stream") as ws:
        while True:
            msg = ws.receive_json()
            assert msg["v"] == 1
            if msg["type"] == "end":
                break
            assert msg["type"] == "frame"
            frames.append(msg)
        ws.send_json({"v": 1, "type": "mark", "start": 30, "end": 35})
        ack = ws.receive_json()
        assert ack["type"] == "marks" and ack["marks"] == [[30, 35]]
        ws.send_json({"v": 1, "type": "commit"})
        fin = ws.receive_json()
        assert fin["type"] == "committed"
        assert fin["tuples_appended"] == 3
    assert [f["index"] for f in frames] == list(range(90))
    # Frame payloads decode to the episode's grayscale images.
    img = Image.open(io.BytesIO(base64.b64decode(frames[0]["png_base64"])))
    assert img.size == (96, 72)
    first = frames[0]
    assert first["box"] is None or len(first["box"]) == 4
    assert first["action"][0] in ("TRACK", "REINIT")
    assert first["action"][1] in ("UPDATE", "IGNORE")
    rewards = {t.frame_index: t.reward
               for t in client.app.state.tracker.replay}
    assert rewards == {0: 1.0, 30: 0.0, 60: 1.0}


def test_stream_resumes_from_cursor(client):
    run = _make_run(client, episode={**EPISODE, "episode_len": 60},
                    stride=30)
    sid = _make_session(client, run)["session_id"]
    with client.websocket_connect(f"/v1/session/{sid}/stream") as ws:
        got = [ws.receive_json()["index"] for _ in range(10)]
    assert got == list(range(10))
    # A reconnect picks up at the session cursor instead of restarting.
    with client.websocket_connect(f"/v1/session/{sid}/stream") as ws:
        nxt = ws.receive_json()
    assert nxt["index"] >= 10


def test_stream_speed_change_and_unknown_session(client):
    run = _make_run(client, episode={**EPISODE, "episode_len": 60},
                    stride=30)
    sid = _make_session(client, run)["session_id"]
    with client.websocket_connect(f"/v1/session/{sid}/stream") as ws:
        ws.send_json({"v": 1, "type": "speed", "multiplier": 2e9})
        kinds = set()
        for _ in range(70):
            msg = ws.receive_json()
            kinds.add(msg["type"])
            if msg["type"] == "speed":
                assert msg["multiplier"] == 2e9
            if msg["type"] == "end":
                break
        assert "speed" in kinds and "end" in kinds
        ws.send_json({"v": 1, "type": "bogus"})
        while True:
            msg = ws.receive_json()
            if msg["type"] == "error":
                break
    with client.websocket_connect("/v1/session/nope/stream") as ws:
        msg = ws.receive_json()
        assert msg["type"] == "error"


def test_ws_throughput_supports_annotation_rate(client):
    # At a 20x speed multiplier the stream must sustain 1200 frames/minute;
    # with pacing disabled the encoder alone must beat that by a wide margin.
    run = _make_run(client, episode={**EPISODE, "episode_len": 100},
                    stride=50)
    sid = _make_session(client, run)["session_id"]
    t0 = time.perf_counter()
    with client.websocket_connect(f"/v1/session/{sid}/stream") as ws:
        n = 0
        while True:
            msg = ws.receive_json()
            if msg["type"] == "end":
                break
            n += 1
    elapsed = time.perf_counter() - t0
    assert n == 100
    assert n / elapsed >= 20.0  # at least 20 frames per second end to end


def test_data_dir_persists_replay(tmp_path):
    settings = ServiceSettings(stride=40, data_dir=str(tmp_path))
    with TestClient(build_app(settings)) as client:
        run = _make_run(client)
        sid = _make_session(client, run)["session_id"]
        client.post(f"/v1/session/{sid}/commit")
    assert (tmp_path / "replay.jsonl").exists()
    with TestClient(build_app(settings)) as client:
        assert len(client.app.state.tracker.replay) == 3
        sid = _make_session(client, _make_run(client,
                            episode={**EPISODE, "seed": 12}))["session_id"]
        client.post(f"/v1/session/{sid}/commit")
        assert len(client.app.state.tracker.replay) == 6
