import hashlib
import json
import time

import httpx
import pytest
from websockets.sync.client import connect as ws_connect

from demoforge import protocol
from demoforge.canonical import canonical_dumps
from demoforge.catalog import load_catalog
from demoforge.client import SessionClient, create_session
from demoforge.service.session import ClientConn, Session
from demoforge.store import EpisodeStore, validate_episode


def ws_url(server, session_id, **params):
    base = server.url.replace("http", "ws", 1)
    query = "&".join(f"{k}={v}" for k, v in params.items())
    return f"{base}/ws/v1/sessions/{session_id}" + (f"?{query}" if query else "")


def post_json(server, path, obj, **kwargs):
    return httpx.post(server.url + path, content=canonical_dumps(obj),
                      timeout=10.0, **kwargs)


# -- in-process session unit behavior ----------------------------------------------

def test_session_advances_without_clients(tmp_path):
    catalog = load_catalog()
    session = Session(session_id="s-unit", scene_entry=catalog.scenes["tabletop"],
                      robot_entry=catalog.robots["planar3"],
                      store=EpisodeStore(tmp_path), created_at=0)
    for _ in range(60):
        frame, outbound = session.advance_tick()
        assert outbound == []
    assert session.world.state.tick == 60
    assert frame.tick == 60
    assert frame.seq == 60


def test_outbound_queue_drops_oldest_frames_only():
    conn = ClientConn("c1")
    conn.push("event-1")
    for i in range(100):
        conn.push(f"frame-{i}", is_frame=True)
    conn.push("event-2")
    queued = [text for text, _ in conn._items]
    frames = [t for t in queued if t.startswith("frame-")]
    assert len(frames) == 64
    assert frames[0] == "frame-36"  # oldest 36 dropped
    assert queued[0] == "event-1" and queued[-1] == "event-2"


# -- HTTP surface --------------------------------------------------------------------

def test_session_lifecycle_and_catalog(server_factory):
    server = server_factory()
    scenes = httpx.get(server.url + "/api/v1/scenes").json()["scenes"]
    assert {s["name"] for s in scenes} == {"bench7", "reach", "tabletop"}
    robots = httpx.get(server.url + "/api/v1/robots").json()["robots"]
    assert {r["name"] for r in robots} == {"arm7", "planar2", "planar3"}
    assert all("joints" in r for r in robots)

    resp = post_json(server, "/api/v1/sessions", {"scene": "tabletop", "robot": "planar3"})
    assert resp.status_code == 201
    desc = resp.json()
    assert desc["state"] == "lobby"
    assert desc["dt"] == pytest.approx(1 / 60)
    assert desc["stream_rate_hz"] == 20

    listed = httpx.get(server.url + "/api/v1/sessions").json()["sessions"]
    assert desc["session_id"] in {s["session_id"] for s in listed}


def test_unknown_scene_and_robot(server_factory):
    server = server_factory()
    assert post_json(server, "/api/v1/sessions",
                     {"scene": "nope", "robot": "planar3"}).status_code == 404
    assert post_json(server, "/api/v1/sessions",
                     {"scene": "tabletop", "robot": "nope"}).status_code == 404


def test_incompatible_robot_for_scene(server_factory):
    server = server_factory()
    resp = post_json(server, "/api/v1/sessions", {"scene": "tabletop", "robot": "arm7"})
    assert resp.status_code == 409


def test_session_capacity(server_factory, tmp_path):
    server = server_factory(data_dir=tmp_path / "cap", extra_args=["--max-sessions", "2"])
    for _ in range(2):
        assert post_json(server, "/api/v1/sessions",
                         {"scene": "reach", "robot": "planar2"}).status_code == 201
    resp = post_json(server, "/api/v1/sessions", {"scene": "reach", "robot": "planar2"})
    assert resp.status_code == 429


# -- websocket handshake ---------------------------------------------------------------

def test_handshake_ok_and_streaming(server_factory):
    server = server_factory()
    sid = create_session(server.url, "tabletop", "planar3")["session_id"]
    with ws_connect(ws_url(server, sid)) as ws:
        ws.send(protocol.encode_message(protocol.Hello(protocol_version=1,
                                                       client_kind="ui")))
        ack = protocol.decode_message(ws.recv(timeout=5))
        assert isinstance(ack, protocol.HelloAck)
        assert ack.session_id == sid
        assert ack.dt == pytest.approx(1 / 60)
        frame = protocol.decode_message(ws.recv(timeout=5))
        assert isinstance(frame, protocol.StateFrameMsg)
        assert frame.tick % 3 == 0


def test_handshake_version_mismatch_closes(server_factory):
    server = server_factory()
    sid = create_session(server.url, "reach", "planar2")["session_id"]
    with ws_connect(ws_url(server, sid)) as ws:
        ws.send(protocol.encode_message(protocol.Hello(protocol_version=2,
                                                       client_kind="ui")))
        err = protocol.decode_message(ws.recv(timeout=5))
        assert isinstance(err, protocol.ErrorMsg)
        assert err.code == "version_mismatch"
        with pytest.raises(Exception):
            ws.recv(timeout=5)


def test_handshake_requires_hello_first(server_factory):
    server = server_factory()
    sid = create_session(server.url, "reach", "planar2")["session_id"]
    with ws_connect(ws_url(server, sid)) as ws:
        ws.send(protocol.encode_message(protocol.Ping(nonce=1)))
        err = protocol.decode_message(ws.recv(timeout=5))
        assert err.code == "protocol_violation"


def test_unknown_session_rejected(server_factory):
    server = server_factory()
    with ws_connect(ws_url(server, "s-missing")) as ws:
        ws.send(protocol.encode_message(protocol.Hello(protocol_version=1,
                                                       client_kind="ui")))
        err = protocol.decode_message(ws.recv(timeout=5))
        assert err.code == "session_closed"


# -- live command handling ----------------------------------------------------------------

def test_teleop_moves_robot(server_factory):
    server = server_factory()
    sid = create_session(server.url, "tabletop", "planar3")["session_id"]
    client = SessionClient(server.url, sid)
    try:
        base = client.latest_frame()
        client.send(protocol.EeDelta(client_seq=client.next_seq(), dx=-0.05))
        _, moved = client.wait_frame(lambda f: f.q != base.q, timeout=5.0)
        assert moved.tick > base.tick
    finally:
        client.close()


def test_ping_pong_roundtrip(server_factory):
    server = server_factory()
    sid = create_session(server.url, "reach", "planar2")["session_id"]
    with ws_connect(ws_url(server, sid)) as ws:
        ws.send(protocol.encode_message(protocol.Hello(protocol_version=1,
                                                       client_kind="probe")))
        protocol.decode_message(ws.recv(timeout=5))
        ws.send(protocol.encode_message(protocol.Ping(nonce=99)))
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            msg = protocol.decode_message(ws.recv(timeout=5))
            if isinstance(msg, protocol.Pong):
                assert msg.nonce == 99
                break
        else:
            pytest.fail("no pong received")


def test_stale_client_seq_rejected_connection_stays_open(server_factory):
    server = server_factory()
    sid = create_session(server.url, "reach", "planar2")["session_id"]
    with ws_connect(ws_url(server, sid)) as ws:
        ws.send(protocol.encode_message(protocol.Hello(protocol_version=1,
                                                       client_kind="probe")))
        protocol.decode_message(ws.recv(timeout=5))
        ws.send(protocol.encode_message(protocol.EeDelta(client_seq=5, dx=0.01)))
        ws.send(protocol.encode_message(protocol.EeDelta(client_seq=5, dx=0.01)))
        deadline = time.monotonic() + 5
        saw_stale = False
        while time.monotonic() < deadline and not saw_stale:
            msg = protocol.decode_message(ws.recv(timeout=5))
            if isinstance(msg, protocol.ErrorMsg):
                assert msg.code == "stale_command"
                saw_stale = True
        assert saw_stale
        # connection still works afterwards
        ws.send(protocol.encode_message(protocol.Ping(nonce=7)))
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            msg = protocol.decode_message(ws.recv(timeout=5))
            if isinstance(msg, protocol.Pong):
                break
        else:
            pytest.fail("connection did not stay open")


def test_malformed_message_reports_schema_violation(server_factory):
    server = server_factory()
    sid = create_session(server.url, "reach", "planar2")["session_id"]
    with ws_connect(ws_url(server, sid)) as ws:
        ws.send(protocol.encode_message(protocol.Hello(protocol_version=1,
                                                       client_kind="probe")))
        protocol.decode_message(ws.recv(timeout=5))
        ws.send("this is not a message")
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            msg = protocol.decode_message(ws.recv(timeout=5))
            if isinstance(msg, protocol.ErrorMsg):
                assert msg.code == "schema_violation"
                break
        else:
            pytest.fail("no error reported")


def test_broadcast_equality_two_clients(server_factory):
    server = server_factory()
    sid = create_session(server.url, "tabletop", "planar3")["session_id"]
    a = SessionClient(server.url, sid, contributor="a")
    b = SessionClient(server.url, sid, contributor="b")
    try:
        a.send(protocol.EeDelta(client_seq=a.next_seq(), dx=-0.06, dy=-0.04))
        a.wait_frame(lambda f: f.tick >= 90, timeout=10.0)
        b.wait_frame(lambda f: f.tick >= 90, timeout=10.0)
        with a._cond:
            frames_a = {f.seq: protocol.encode_message(f) for _, f in a._frames}
        with b._cond:
            frames_b = {f.seq: protocol.encode_message(f) for _, f in b._frames}
        shared = sorted(set(frames_a) & set(frames_b))
        assert len(shared) >= 20
        for seq in shared:
            assert frames_a[seq] == frames_b[seq]
    finally:
        a.close()
        b.close()


# -- recording over HTTP ------------------------------------------------------------------

def test_http_recording_lifecycle(server_factory, tmp_path):
    server = server_factory(data_dir=tmp_path / "rec")
    sid = create_session(server.url, "tabletop", "planar3")["session_id"]
    start = post_json(server, f"/api/v1/sessions/{sid}/recording/start",
                      {"label": "http-test"}, headers={"X-Contributor": "carol"})
    assert start.status_code == 201
    episode_id = start.json()["episode_id"]
    start_tick = start.json()["tick"]

    dup = post_json(server, f"/api/v1/sessions/{sid}/recording/start", {"label": "x"})
    assert dup.status_code == 409

    time.sleep(0.5)
    stop = post_json(server, f"/api/v1/sessions/{sid}/recording/stop", {})
    assert stop.status_code == 200
    manifest = stop.json()
    assert manifest["episode_id"] == episode_id
    assert manifest["start_tick"] == start_tick
    assert manifest["frame_count"] == manifest["end_tick"] - start_tick + 1
    assert manifest["frame_count"] > 0
    assert "carol" in manifest["contributors"]

    again = post_json(server, f"/api/v1/sessions/{sid}/recording/stop", {})
    assert again.status_code == 409

    report = validate_episode(tmp_path / "rec" / "episodes" / episode_id)
    assert report.ok

    view = httpx.get(server.url + f"/api/v1/episodes/{episode_id}").json()
    assert view["frame_count"] == manifest["frame_count"]
    lines = httpx.get(server.url + f"/api/v1/episodes/{episode_id}/frames").text
    assert len(lines.splitlines()) == manifest["frame_count"]


def test_recording_event_carries_first_recorded_tick(server_factory, tmp_path):
    server = server_factory(data_dir=tmp_path / "rec2")
    sid = create_session(server.url, "reach", "planar2")["session_id"]
    client = SessionClient(server.url, sid)
    try:
        client.send(protocol.RecordStart(client_seq=client.next_seq(), label="ev"))
        started = client.wait_event(lambda e: e.event == "started")
        client.send(protocol.RecordStop(client_seq=client.next_seq()))
        client.wait_event(lambda e: e.event == "stopped")
        store = EpisodeStore(tmp_path / "rec2")
        manifest = store.read_manifest(started.episode_id)
        assert manifest["start_tick"] == started.tick
        first_line = next(iter(store.iter_frame_lines(started.episode_id)))
        assert json.loads(first_line)["tick"] == started.tick
    finally:
        client.close()


def test_ws_stop_without_start_reports_error(server_factory):
    server = server_factory()
    sid = create_session(server.url, "reach", "planar2")["session_id"]
    client = SessionClient(server.url, sid)
    try:
        client.send(protocol.RecordStop(client_seq=client.next_seq()))
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            errors = client.errors()
            if errors:
                assert "not_recording" in errors[0].detail
                break
            time.sleep(0.05)
        else:
            pytest.fail("no error delivered")
    finally:
        client.close()


# -- ingestion ----------------------------------------------------------------------------

def test_media_upload_digest_idempotence_and_cap(server_factory, tmp_path):
    server = server_factory(data_dir=tmp_path / "media")
    sid = create_session(server.url, "tabletop", "planar3")["session_id"]
    post_json(server, f"/api/v1/sessions/{sid}/recording/start", {"label": "m"})
    time.sleep(0.3)
    episode_id = post_json(server, f"/api/v1/sessions/{sid}/recording/stop",
                           {}).json()["episode_id"]

    blob = b"\x00video-bytes\xff" * 73
    digest = hashlib.sha256(blob).hexdigest()
    r1 = httpx.post(server.url + f"/api/v1/media/{episode_id}", content=blob,
                    headers={"X-Contributor": "dave",
                             "Content-Type": "video/webm",
                             "X-Declared-Digest": digest})
    assert r1.status_code == 201
    rec = r1.json()
    assert rec["media_id"] == digest
    assert rec["byte_length"] == len(blob)
    assert rec["metadata"]["contributor"] == "dave"
    assert rec["metadata"]["scene"] == "tabletop"

    r2 = httpx.post(server.url + f"/api/v1/media/{episode_id}", content=blob,
                    headers={"Content-Type": "video/webm"})
    assert r2.json()["media_id"] == digest

    bad = httpx.post(server.url + f"/api/v1/media/{episode_id}", content=blob,
                     headers={"X-Declared-Digest": "00" * 32})
    assert bad.status_code == 400

    r404 = httpx.post(server.url + "/api/v1/media/nonexistent", content=b"x")
    assert r404.status_code == 404

    view = httpx.get(server.url + f"/api/v1/episodes/{episode_id}").json()
    assert len(view["media"]) == 1
    assert "dave" in view["contributors"]


def test_media_cap_rejects_large_uploads(server_factory, tmp_path):
    server = server_factory(data_dir=tmp_path / "capm",
                            extra_args=["--media-cap-bytes", "1024"])
    sid = create_session(server.url, "reach", "planar2")["session_id"]
    resp = httpx.post(server.url + f"/api/v1/media/{sid}", content=b"y" * 4096)
    assert resp.status_code == 413
    store_media = tmp_path / "capm" / "sessions" / sid / "media"
    assert not store_media.exists() or not any(store_media.iterdir())


def test_annotation_endpoint(server_factory, tmp_path):
    server = server_factory(data_dir=tmp_path / "ann")
    sid = create_session(server.url, "tabletop", "planar3")["session_id"]
    post_json(server, f"/api/v1/sessions/{sid}/recording/start", {"label": "a"})
    time.sleep(0.3)
    manifest = post_json(server, f"/api/v1/sessions/{sid}/recording/stop", {}).json()
    eid = manifest["episode_id"]

    ok = post_json(server, "/api/v1/annotations",
                   {"target": eid, "kind": "task_description",
                    "text": "picked nothing up"},
                   headers={"X-Contributor": "erin"})
    assert ok.status_code == 201
    assert ok.json()["annotation_id"].startswith("ann-")
    view = httpx.get(server.url + f"/api/v1/episodes/{eid}").json()
    assert len(view["annotations"]) == 1

    assert post_json(server, "/api/v1/annotations",
                     {"target": eid, "kind": "procedure", "text": ""}).status_code == 400
    assert post_json(server, "/api/v1/annotations",
                     {"target": eid, "kind": "procedure", "text": "x",
                      "anchor": [50, 40]}).status_code == 400
    assert post_json(server, "/api/v1/annotations",
                     {"target": "ghost", "kind": "procedure",
                      "text": "x"}).status_code == 404
    # session-targeted annotations land in the session directory
    ok2 = post_json(server, "/api/v1/annotations",
                    {"target": sid, "kind": "rationale", "text": "session note"})
    assert ok2.status_code == 201
