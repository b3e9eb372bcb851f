import hashlib
import json
from pathlib import Path

import pytest

from demoforge import protocol
from demoforge.catalog import load_catalog
from demoforge.client import ScriptRow
from demoforge.store import (ACTIONS_LOG, ANNOTATIONS_LOG, FRAMES_LOG,
                             META_FINAL, META_PROVISIONAL, SCENE_COPY,
                             ActionEvent, DigestMismatch, EpisodeStore,
                             StoreError, export_dataset, replay_check,
                             replay_episode, validate_episode)
from demoforge.world import DT, SimFrame, World
from recording import record_inprocess


def make_writer(tmp_path, catalog, start_tick=10):
    store = EpisodeStore(tmp_path)
    scene = catalog.scenes["tabletop"]
    robot = catalog.robots["planar3"]
    world = World(scene.spec, robot.model)
    state = world.state_record()
    state["next_seq"] = start_tick
    writer = store.open_episode(
        session_id="s-test", label="unit", start_tick=start_tick,
        start_state=state, scene_name=scene.name, scene_digest=scene.digest,
        scene_text=scene.text, robot_name=robot.name, robot_digest=robot.digest,
        robot_text=robot.text, contributors=["tester"])
    return store, world, writer


def frame_at(world, tick, seq) -> SimFrame:
    world.state.tick = tick - 1
    world.step(DT)
    return world.snapshot(seq)


# -- writer ------------------------------------------------------------------------

def test_open_creates_crash_safe_skeleton(tmp_path, catalog):
    store, _, writer = make_writer(tmp_path, catalog)
    d = store.episode_dir(writer.episode_id)
    assert (d / META_PROVISIONAL).is_file()
    assert (d / SCENE_COPY).is_file()
    assert (d / FRAMES_LOG).is_file()
    assert not (d / META_FINAL).exists()


def test_second_open_for_same_session_rejected(tmp_path, catalog):
    store, world, writer = make_writer(tmp_path, catalog)
    with pytest.raises(StoreError) as e:
        store.open_episode(session_id="s-test", label="x", start_tick=1,
                           start_state={}, scene_name="s", scene_digest="d",
                           scene_text="", robot_name="r", robot_digest="d",
                           robot_text="")
    assert "already" in str(e.value)


def test_frame_tick_continuity(tmp_path, catalog):
    _, world, writer = make_writer(tmp_path, catalog)
    writer.append_frame(frame_at(world, 10, 10))
    writer.append_frame(frame_at(world, 11, 11))
    with pytest.raises(StoreError) as e:
        writer.append_frame(frame_at(world, 13, 12))
    assert "discontinuity" in str(e.value)


def test_action_tick_alignment(tmp_path, catalog):
    _, world, writer = make_writer(tmp_path, catalog)
    writer.append_frame(frame_at(world, 10, 10))
    ok = ActionEvent(tick=11, kind="teleop",
                     payload={"type": "ee_delta", "dx": 0.01, "dy": 0.0, "dz": 0.0,
                              "droll": 0.0, "dpitch": 0.0, "dyaw": 0.0},
                     client_seq=1, origin="c1")
    writer.append_action(ok)
    with pytest.raises(StoreError):
        writer.append_action(ActionEvent(tick=13, kind="reset",
                                         payload={"type": "reset"},
                                         client_seq=2, origin="c1"))
    with pytest.raises(StoreError):
        writer.append_action(ActionEvent(tick=9, kind="reset",
                                         payload={"type": "reset"},
                                         client_seq=3, origin="c1"))


def test_finalize_counts_and_double_finalize(tmp_path, catalog):
    _, world, writer = make_writer(tmp_path, catalog)
    for i in range(5):
        writer.append_frame(frame_at(world, 10 + i, 10 + i))
    manifest = writer.finalize()
    assert manifest["frame_count"] == 5
    assert manifest["end_tick"] == 14
    assert manifest["action_count"] == 0
    assert manifest["finalized"] is True
    with pytest.raises(StoreError):
        writer.finalize()
    with pytest.raises(StoreError):
        writer.append_frame(frame_at(world, 15, 15))


def test_scene_copy_digest_matches_manifest(tmp_path, catalog):
    store, world, writer = make_writer(tmp_path, catalog)
    writer.append_frame(frame_at(world, 10, 10))
    manifest = writer.finalize()
    from demoforge.configtext import parse
    from demoforge.world import parse_scene
    d = store.episode_dir(manifest["episode_id"])
    copied = parse_scene(parse((d / SCENE_COPY).read_text()))
    assert copied.digest() == manifest["scene_digest"]


# -- validation ---------------------------------------------------------------------

def test_validate_fresh_episode_ok(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, rows=[ScriptRow(0, "delta",
                                                               (0.01, 0.0, 0.0, 0.0, 0.0, 0.0))],
                                     tail=20)
    report = validate_episode(store.episode_dir(eid))
    assert report.ok
    assert report.warnings == []


def test_validate_corrupted_frame_line(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=20)
    path = store.episode_dir(eid) / FRAMES_LOG
    lines = path.read_text().splitlines()
    lines[3] = lines[3][:-5] + 'oops"'
    path.write_text("\n".join(lines) + "\n")
    report = validate_episode(store.episode_dir(eid))
    assert not report.ok
    assert any(f"{FRAMES_LOG}:4" in err for err in report.errors)


def test_validate_truncated_unfinalized_episode(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=20, stop_via_close=False)
    d = store.episode_dir(eid)
    # rebuild the crashed shape: drop the final manifest, tear the last line
    (d / META_FINAL).unlink()
    raw = (d / FRAMES_LOG).read_text()
    (d / FRAMES_LOG).write_text(raw[:-40])
    report = validate_episode(d)
    assert report.ok
    assert any("not finalized" in w for w in report.warnings)
    assert any("torn" in w or "truncated" in w for w in report.warnings)


def test_validate_manifest_count_mismatch(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=20)
    d = store.episode_dir(eid)
    with open(d / FRAMES_LOG) as f:
        lines = f.read().splitlines()
    (d / FRAMES_LOG).write_text("\n".join(lines[:-1]) + "\n")
    report = validate_episode(d)
    assert not report.ok
    assert any("frame_count" in e for e in report.errors)


def test_validate_anchor_out_of_range(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=20)
    d = store.episode_dir(eid)
    bad = {"t": "annotation", "annotation_id": "ann-x", "target": eid,
           "author": "a", "text": "note", "kind": "constraint",
           "created_at": 0, "anchor": [0, 10**6]}
    with open(d / ANNOTATIONS_LOG, "a") as f:
        f.write(json.dumps(bad, sort_keys=True, separators=(",", ":")) + "\n")
    report = validate_episode(d)
    assert not report.ok
    assert any("anchor" in e for e in report.errors)


# -- replay -------------------------------------------------------------------------

def test_replay_equality_recorded_episode(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, script="grip_cycle", tail=40)
    result = replay_check(store.episode_dir(eid), catalog)
    assert result.equal
    assert result.frames_checked > 0


def test_replay_empty_episode(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=0)
    manifest = store.read_manifest(eid)
    assert manifest["frame_count"] == 0
    result = replay_check(store.episode_dir(eid), catalog)
    assert result.equal
    assert result.frames_checked == 0


def test_replay_detects_tampered_frame(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=20)
    d = store.episode_dir(eid)
    lines = (d / FRAMES_LOG).read_text().splitlines()
    victim = json.loads(lines[5])
    victim["q"][0] += 1e-9
    lines[5] = json.dumps(victim, sort_keys=True, separators=(",", ":"))
    (d / FRAMES_LOG).write_text("\n".join(lines) + "\n")
    result = replay_check(d, catalog)
    assert not result.equal
    assert result.first_divergent_tick == victim["tick"]


def test_replay_digest_mismatch_when_scene_changed(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=20)
    registry = load_catalog()
    tampered = registry.scenes["tabletop"].text.replace("position 0.8 0.3 0.0",
                                                        "position 0.81 0.3 0.0")
    registry.add_scene_text(tampered)
    with pytest.raises(DigestMismatch):
        list(replay_episode(store.episode_dir(eid), registry))


def test_replay_recording_started_mid_session(tmp_path, catalog):
    # the start-state snapshot, not the scene alone, is what replay restores
    store, _, eid = record_inprocess(
        tmp_path, tail=30, pre_ticks=50,
        rows=[ScriptRow(0, "delta", (-0.05, -0.03, 0.0, 0.0, 0.0, 0.0))])
    manifest = store.read_manifest(eid)
    assert manifest["start_tick"] > 50
    assert replay_check(store.episode_dir(eid), catalog).equal


def test_replay_reset_mid_recording(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, script="reset_mid", tail=40)
    actions = (store.episode_dir(eid) / ACTIONS_LOG).read_text()
    assert '"type":"reset"' in actions
    assert replay_check(store.episode_dir(eid), catalog).equal


# -- media and annotations -------------------------------------------------------------

def test_media_content_addressing_and_idempotence(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=10)
    blob = b"\x00demo-bytes" * 100
    rec1 = store.put_media(eid, blob, declared_mime="application/octet-stream")
    assert rec1.media_id == hashlib.sha256(blob).hexdigest()
    rec2 = store.put_media(eid, blob, declared_mime="application/octet-stream")
    assert rec2.media_id == rec1.media_id
    media_files = list((store.episode_dir(eid) / "media").iterdir())
    assert len(media_files) == 1


def test_media_declared_digest_mismatch_persists_nothing(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=10)
    with pytest.raises(StoreError):
        store.put_media(eid, b"payload", declared_mime="text/plain",
                        declared_digest="ab" * 32)
    assert not (store.episode_dir(eid) / "media").exists()


def test_media_cap_enforced(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=10)
    with pytest.raises(StoreError):
        store.put_media(eid, b"x" * 2048, declared_mime="text/plain", cap_bytes=1024)


def test_media_unknown_target(tmp_path, catalog):
    store = EpisodeStore(tmp_path)
    with pytest.raises(StoreError):
        store.put_media("nope", b"data", declared_mime="text/plain")


def test_annotation_flow_and_manifest_view(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=20)
    before = store.manifest_view(eid)
    record = store.add_annotation(eid, author="alice", text="grasp the box",
                                  kind="task_description")
    after = store.manifest_view(eid)
    assert len(after["annotations"]) == len(before["annotations"]) + 1
    assert "alice" in after["contributors"]
    assert record.annotation_id.startswith("ann-")


def test_annotation_rejections(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path, tail=20)
    with pytest.raises(StoreError):
        store.add_annotation(eid, author="a", text="", kind="procedure")
    with pytest.raises(StoreError):
        store.add_annotation(eid, author="a", text="x", kind="procedure",
                             anchor=(50, 40))
    with pytest.raises(StoreError):
        store.add_annotation("missing-target", author="a", text="x",
                             kind="procedure")
    manifest = store.read_manifest(eid)
    with pytest.raises(StoreError):
        store.add_annotation(eid, author="a", text="x", kind="procedure",
                             anchor=(manifest["start_tick"],
                                     manifest["end_tick"] + 5))


# -- export -------------------------------------------------------------------------

def test_export_filters_rows_and_determinism(tmp_path, catalog):
    store, _, eid1 = record_inprocess(tmp_path / "store", script=None, tail=15,
                                      label="empty-hands")
    _, _, eid2 = record_inprocess(tmp_path / "store", scene_name="reach",
                                  rows=[ScriptRow(0, "delta",
                                                  (0.05, 0.0, 0.0, 0.0, 0.0, 0.0))],
                                  tail=15, label="walk")
    store = EpisodeStore(tmp_path / "store")
    out1 = tmp_path / "out1"
    result = export_dataset(store, out1)
    assert sorted(result.episode_ids) == sorted([eid1, eid2])
    index_lines = (out1 / "index.log").read_text().splitlines()
    assert len(index_lines) == 2

    for eid in (eid1, eid2):
        manifest = store.read_manifest(eid)
        rows = (out1 / f"{eid}.aligned.log").read_text().splitlines()
        assert len(rows) == manifest["frame_count"]
        joined = [json.loads(r) for r in rows]
        with_actions = [r for r in joined if r["action"] is not None]
        assert sum(len(r["action"]) for r in with_actions) == manifest["action_count"]

    only_reach = export_dataset(store, tmp_path / "out-reach", scene="reach")
    assert only_reach.episode_ids == [eid2]
    by_label = export_dataset(store, tmp_path / "out-label", label="empty-hands")
    assert by_label.episode_ids == [eid1]

    out2 = tmp_path / "out2"
    export_dataset(store, out2)
    for name in ["index.log", f"{eid1}.aligned.log", f"{eid2}.aligned.log"]:
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_export_empty_selection_warns(tmp_path):
    store = EpisodeStore(tmp_path / "store")
    result = export_dataset(store, tmp_path / "out")
    assert result.warning
    assert (tmp_path / "out" / "index.log").read_text() == ""


def test_export_plots_renders_figures(tmp_path, catalog):
    store, _, eid = record_inprocess(tmp_path / "store", script="grip_cycle",
                                     tail=30)
    store = EpisodeStore(tmp_path / "store")
    export_dataset(store, tmp_path / "out", plots=True)
    png = tmp_path / "out" / f"{eid}.png"
    assert png.is_file()
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
