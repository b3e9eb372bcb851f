"""Append-only episode store: aligned frame/action/annotation logs, validation,
deterministic replay, and dataset export.

Layout, one directory per episode under <data_dir>/episodes/<episode_id>/:

    meta.provisional   written first (crash-safe ordering), never mutated
    meta.json          written atomically by finalize (temp + rename)
    scene.copy         the scene document text at recording time
    robot.copy         the robot document text at recording time
    frames.log         newline-delimited canonical state records, one per tick
    actions.log        canonical action records, ticks non-decreasing
    annotations.log    canonical annotation records (appendable post-finalize)
    media.log          canonical media records
    media/<digest>     content-addressed blobs

Session-targeted annotations/media live under <data_dir>/sessions/<session_id>/
with the same media/annotation layout.
"""

import hashlib
import os
import secrets
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import protocol
from .canonical import canonical_dumps, canonical_loads
from .configtext import parse as parse_config
from .kinematics import load_robot_model
from .world import DT, TICK_RATE, SimFrame, World, parse_scene

META_FINAL = "meta.json"
META_PROVISIONAL = "meta.provisional"
SCENE_COPY = "scene.copy"
ROBOT_COPY = "robot.copy"
FRAMES_LOG = "frames.log"
ACTIONS_LOG = "actions.log"
ANNOTATIONS_LOG = "annotations.log"
MEDIA_LOG = "media.log"
MEDIA_DIR = "media"

FSYNC_EVERY_FRAMES = 60

ANNOTATION_KINDS = ("task_description", "procedure", "constraint", "rationale")


class StoreError(Exception):
    pass


class DigestMismatch(StoreError):
    """The scene (or robot) backing an episode changed since it was recorded."""


def now_ms() -> int:
    return int(time.time() * 1000)


def new_episode_id(created_at_ms: int | None = None) -> str:
    ms = now_ms() if created_at_ms is None else created_at_ms
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime(ms / 1000.0))
    return f"{stamp}-{secrets.token_hex(4)}"


# -- records -----------------------------------------------------------------

@dataclass(frozen=True)
class ActionEvent:
    tick: int
    kind: str  # teleop | reset | gripper
    payload: dict  # {"type": ee_delta|pose_target|gripper|reset, ...params}
    client_seq: int
    origin: str  # connection id that issued the command

    def to_record(self) -> dict:
        return {"t": "action", "tick": self.tick, "kind": self.kind,
                "payload": self.payload, "client_seq": self.client_seq,
                "origin": self.origin}

    @staticmethod
    def from_record(obj: dict) -> "ActionEvent":
        return ActionEvent(tick=obj["tick"], kind=obj["kind"], payload=obj["payload"],
                           client_seq=obj["client_seq"], origin=obj["origin"])


def command_to_action(msg, tick: int, origin: str) -> ActionEvent:
    """Project an applied command message into its logged ActionEvent."""
    if isinstance(msg, protocol.EeDelta):
        payload = {"type": "ee_delta", "dx": msg.dx, "dy": msg.dy, "dz": msg.dz,
                   "droll": msg.droll, "dpitch": msg.dpitch, "dyaw": msg.dyaw}
        kind = "teleop"
    elif isinstance(msg, protocol.PoseTarget):
        payload = {"type": "pose_target", "pose": list(msg.pose)}
        kind = "teleop"
    elif isinstance(msg, protocol.GripperCmd):
        payload = {"type": "gripper", "action": msg.action}
        kind = "gripper"
    elif isinstance(msg, protocol.ResetCmd):
        payload = {"type": "reset"}
        kind = "reset"
    else:
        raise TypeError(f"not a recordable command: {type(msg).__name__}")
    return ActionEvent(tick=tick, kind=kind, payload=payload,
                       client_seq=msg.client_seq, origin=origin)


def apply_action(world: World, event: ActionEvent) -> None:
    """Apply a logged action to a world; the session loop and replay share
    this path so live recording and re-simulation cannot diverge."""
    p = event.payload
    kind = p.get("type")
    if kind == "ee_delta":
        world.apply_teleop(protocol.EeDelta(client_seq=event.client_seq,
                                            dx=p["dx"], dy=p["dy"], dz=p["dz"],
                                            droll=p["droll"], dpitch=p["dpitch"],
                                            dyaw=p["dyaw"]))
    elif kind == "pose_target":
        world.apply_teleop(protocol.PoseTarget(client_seq=event.client_seq,
                                               pose=tuple(p["pose"])))
    elif kind == "gripper":
        world.apply_teleop(protocol.GripperCmd(client_seq=event.client_seq,
                                               action=p["action"]))
    elif kind == "reset":
        world.reset()
    else:
        raise StoreError(f"unknown action payload type {kind!r}")


@dataclass(frozen=True)
class AnnotationRecord:
    annotation_id: str
    target: str  # episode_id or session_id
    author: str
    text: str
    kind: str  # task_description | procedure | constraint | rationale
    created_at: int
    anchor: tuple | None = None  # (t0, t1) tick range

    def to_record(self) -> dict:
        return {"t": "annotation", "annotation_id": self.annotation_id,
                "target": self.target, "author": self.author, "text": self.text,
                "kind": self.kind, "created_at": self.created_at,
                "anchor": list(self.anchor) if self.anchor else None}

    @staticmethod
    def from_record(obj: dict) -> "AnnotationRecord":
        anchor = obj.get("anchor")
        return AnnotationRecord(annotation_id=obj["annotation_id"], target=obj["target"],
                                author=obj["author"], text=obj["text"], kind=obj["kind"],
                                created_at=obj["created_at"],
                                anchor=tuple(anchor) if anchor else None)


@dataclass(frozen=True)
class MediaRecord:
    media_id: str  # the content digest, so identical bytes share an id
    target: str
    source: str  # upload | sim_capture
    content_digest: str
    byte_length: int
    declared_mime: str
    metadata: dict
    created_at: int

    def to_record(self) -> dict:
        return {"t": "media", "media_id": self.media_id, "target": self.target,
                "source": self.source, "content_digest": self.content_digest,
                "byte_length": self.byte_length, "declared_mime": self.declared_mime,
                "metadata": self.metadata, "created_at": self.created_at}

    @staticmethod
    def from_record(obj: dict) -> "MediaRecord":
        return MediaRecord(media_id=obj["media_id"], target=obj["target"],
                           source=obj["source"], content_digest=obj["content_digest"],
                           byte_length=obj["byte_length"],
                           declared_mime=obj["declared_mime"],
                           metadata=obj["metadata"], created_at=obj["created_at"])


@dataclass
class ValidationReport:
    path: str
    warnings: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def lines(self) -> list:
        out = [f"{'ok' if self.ok else 'FAIL'} {self.path}"]
        out += [f"  warning: {w}" for w in self.warnings]
        out += [f"  error: {e}" for e in self.errors]
        return out


# -- writer -------------------------------------------------------------------

class EpisodeWriter:
    """Single-writer append channel for one episode; one per session."""

    def __init__(self, store: "EpisodeStore", episode_id: str, meta: dict):
        self.store = store
        self.episode_id = episode_id
        self.dir = store.episode_dir(episode_id)
        self.meta = meta
        self.start_tick = meta["start_tick"]
        self.session_id = meta["session_id"]
        self.finalized = False
        self._frame_count = 0
        self._action_count = 0
        self._last_frame_tick = None
        self._last_action_tick = None
        self._origins = set()
        self._frames_f = open(self.dir / FRAMES_LOG, "a", encoding="utf-8")
        self._actions_f = open(self.dir / ACTIONS_LOG, "a", encoding="utf-8")

    @property
    def origins(self) -> frozenset:
        return frozenset(self._origins)

    def _guard(self):
        if self.finalized:
            raise StoreError(f"episode {self.episode_id} is finalized")

    def append_frame(self, frame: SimFrame) -> None:
        self._guard()
        expected = self.start_tick if self._last_frame_tick is None \
            else self._last_frame_tick + 1
        if frame.tick != expected:
            raise StoreError(f"tick discontinuity: expected {expected}, got {frame.tick}")
        line = protocol.encode_message(frame.to_message())
        self._frames_f.write(line + "\n")
        self._frames_f.flush()
        self._frame_count += 1
        self._last_frame_tick = frame.tick
        if self._frame_count % FSYNC_EVERY_FRAMES == 0:
            os.fsync(self._frames_f.fileno())

    def append_action(self, event: ActionEvent) -> None:
        self._guard()
        current = self.start_tick if self._last_frame_tick is None \
            else self._last_frame_tick + 1
        if not self.start_tick <= event.tick <= current:
            raise StoreError(f"action tick {event.tick} outside "
                             f"[{self.start_tick}, {current}]")
        if self._last_action_tick is not None and event.tick < self._last_action_tick:
            raise StoreError("action ticks must be non-decreasing")
        self._actions_f.write(canonical_dumps(event.to_record()) + "\n")
        self._actions_f.flush()
        self._action_count += 1
        self._last_action_tick = event.tick
        self._origins.add(event.origin)

    def append_annotation(self, record: AnnotationRecord) -> None:
        self._guard()
        with open(self.dir / ANNOTATIONS_LOG, "a", encoding="utf-8") as f:
            f.write(canonical_dumps(record.to_record()) + "\n")

    def finalize(self, extra_contributors=()) -> dict:
        """Compute counts, write the manifest atomically, and close the writer."""
        self._guard()
        end_tick = self._last_frame_tick if self._last_frame_tick is not None \
            else self.start_tick - 1
        manifest = dict(self.meta)
        manifest.update({
            "end_tick": end_tick,
            "frame_count": self._frame_count,
            "action_count": self._action_count,
            "contributors": sorted(set(self.meta.get("contributors", ()))
                                   | set(extra_contributors)),
            "multi_writer": len(self._origins) > 1,
            "finalized": True,
        })
        self._frames_f.flush()
        os.fsync(self._frames_f.fileno())
        self._actions_f.flush()
        os.fsync(self._actions_f.fileno())
        self._frames_f.close()
        self._actions_f.close()
        tmp = self.dir / (META_FINAL + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(canonical_dumps(manifest) + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.dir / META_FINAL)
        self.finalized = True
        self.store._writer_closed(self.session_id)
        return manifest


# -- store --------------------------------------------------------------------

class EpisodeStore:
    def __init__(self, data_dir):
        self.root = Path(data_dir)
        self.episodes_root = self.root / "episodes"
        self.sessions_root = self.root / "sessions"
        self.episodes_root.mkdir(parents=True, exist_ok=True)
        self._open_sessions = {}

    def episode_dir(self, episode_id: str) -> Path:
        return self.episodes_root / episode_id

    def list_episodes(self) -> list:
        if not self.episodes_root.is_dir():
            return []
        return sorted(p.name for p in self.episodes_root.iterdir() if p.is_dir())

    def open_episode(self, *, session_id: str, label: str, start_tick: int,
                     start_state: dict, scene_name: str, scene_digest: str,
                     scene_text: str, robot_name: str, robot_digest: str,
                     robot_text: str, contributors=()) -> EpisodeWriter:
        if session_id in self._open_sessions:
            raise StoreError(f"session {session_id} already has an open episode")
        episode_id = new_episode_id()
        d = self.episode_dir(episode_id)
        d.mkdir(parents=True)
        meta = {
            "t": "episode",
            "episode_id": episode_id,
            "session_id": session_id,
            "scene": scene_name,
            "scene_digest": scene_digest,
            "robot": robot_name,
            "robot_digest": robot_digest,
            "label": label,
            "start_tick": start_tick,
            "tick_rate": TICK_RATE,
            "created_at": now_ms(),
            "start_state": start_state,
            "contributors": sorted(set(contributors)),
            "finalized": False,
        }
        # crash-safe ordering: scene/robot copies and the provisional manifest
        # land before any log line
        (d / SCENE_COPY).write_text(scene_text, encoding="utf-8")
        (d / ROBOT_COPY).write_text(robot_text, encoding="utf-8")
        with open(d / META_PROVISIONAL, "w", encoding="utf-8") as f:
            f.write(canonical_dumps(meta) + "\n")
            f.flush()
            os.fsync(f.fileno())
        writer = EpisodeWriter(self, episode_id, meta)
        self._open_sessions[session_id] = writer
        return writer

    def _writer_closed(self, session_id: str) -> None:
        self._open_sessions.pop(session_id, None)

    def read_manifest(self, episode_id: str) -> dict:
        d = self.episode_dir(episode_id)
        if not d.is_dir():
            raise StoreError(f"unknown episode {episode_id!r}")
        return read_manifest_dir(d)

    def manifest_view(self, episode_id: str) -> dict:
        """Manifest plus live annotation/media listings (both stay appendable
        after finalize, so they are read from the logs, not frozen)."""
        manifest = dict(self.read_manifest(episode_id))
        d = self.episode_dir(episode_id)
        annotations = [obj for _, obj in _read_log(d / ANNOTATIONS_LOG)]
        media = [obj for _, obj in _read_log(d / MEDIA_LOG)]
        manifest["annotations"] = annotations
        manifest["media"] = media
        contributors = set(manifest.get("contributors", []))
        contributors.update(a.get("author") for a in annotations if a.get("author"))
        contributors.update(m.get("metadata", {}).get("contributor") for m in media
                            if m.get("metadata", {}).get("contributor"))
        manifest["contributors"] = sorted(contributors)
        return manifest

    def iter_frame_lines(self, episode_id: str):
        path = self.episode_dir(episode_id) / FRAMES_LOG
        if not path.is_file():
            return
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.endswith("\n"):
                    yield line[:-1]

    # -- annotation / media targets ------------------------------------------

    def target_dir(self, target_id: str, create_session_dir: bool = False):
        """Resolve an episode or session target id to its directory."""
        d = self.episode_dir(target_id)
        if d.is_dir():
            return "episode", d
        d = self.sessions_root / target_id
        if d.is_dir():
            return "session", d
        if create_session_dir:
            d.mkdir(parents=True, exist_ok=True)
            return "session", d
        return None, None

    def add_annotation(self, target_id: str, *, author: str, text: str, kind: str,
                       anchor=None, known_session_ids=()) -> AnnotationRecord:
        if not text:
            raise StoreError("annotation text must be non-empty")
        if kind not in ANNOTATION_KINDS:
            raise StoreError(f"annotation kind must be one of {ANNOTATION_KINDS}")
        if anchor is not None:
            t0, t1 = int(anchor[0]), int(anchor[1])
            if t0 > t1:
                raise StoreError(f"annotation anchor [{t0}, {t1}] has t0 > t1")
            anchor = (t0, t1)
        kind_dir, d = self.target_dir(
            target_id, create_session_dir=target_id in known_session_ids)
        if d is None:
            raise StoreError(f"unknown annotation target {target_id!r}")
        if kind_dir == "episode" and anchor is not None:
            manifest = read_manifest_dir(d)
            start = manifest["start_tick"]
            end = manifest.get("end_tick")
            if end is None:
                end = _last_frame_tick(d, start)
            if not (start <= anchor[0] and anchor[1] <= end):
                raise StoreError(f"anchor {list(anchor)} outside episode tick range "
                                 f"[{start}, {end}]")
        record = AnnotationRecord(annotation_id=f"ann-{secrets.token_hex(6)}",
                                  target=target_id, author=author, text=text,
                                  kind=kind, created_at=now_ms(), anchor=anchor)
        with open(d / ANNOTATIONS_LOG, "a", encoding="utf-8") as f:
            f.write(canonical_dumps(record.to_record()) + "\n")
        return record

    def put_media(self, target_id: str, data: bytes, *, declared_mime: str,
                  source: str = "upload", metadata=None, declared_digest=None,
                  cap_bytes=None, known_session_ids=()) -> MediaRecord:
        """Content-addressed media store; re-uploading identical bytes returns
        the existing record (idempotent)."""
        if not data:
            raise StoreError("media body must be non-empty")
        if cap_bytes is not None and len(data) > cap_bytes:
            raise StoreError(f"media body of {len(data)} bytes exceeds cap {cap_bytes}")
        digest = hashlib.sha256(data).hexdigest()
        if declared_digest is not None and declared_digest.lower() != digest:
            raise StoreError(f"declared digest {declared_digest} does not match "
                             f"content digest {digest}")
        _, d = self.target_dir(target_id,
                               create_session_dir=target_id in known_session_ids)
        if d is None:
            raise StoreError(f"unknown media target {target_id!r}")
        for _, obj in _read_log(d / MEDIA_LOG):
            if obj.get("content_digest") == digest:
                return MediaRecord.from_record(obj)
        media_dir = d / MEDIA_DIR
        media_dir.mkdir(exist_ok=True)
        blob = media_dir / digest
        if not blob.exists():
            tmp = media_dir / (digest + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, blob)
        record = MediaRecord(media_id=digest, target=target_id, source=source,
                             content_digest=digest, byte_length=len(data),
                             declared_mime=declared_mime, metadata=dict(metadata or {}),
                             created_at=now_ms())
        with open(d / MEDIA_LOG, "a", encoding="utf-8") as f:
            f.write(canonical_dumps(record.to_record()) + "\n")
        return record


# -- shared readers -------------------------------------------------------------

def read_manifest_dir(d: Path) -> dict:
    final = d / META_FINAL
    if final.is_file():
        return canonical_loads(final.read_text(encoding="utf-8"))
    provisional = d / META_PROVISIONAL
    if provisional.is_file():
        return canonical_loads(provisional.read_text(encoding="utf-8"))
    raise StoreError(f"no manifest in {d}")


def _read_log(path: Path):
    """Yield (line_number, decoded object) for complete lines of a record log."""
    if not path.is_file():
        return
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        text = f.read()
    for i, line in enumerate(text.split("\n")[:-1] if text.endswith("\n")
                             else text.split("\n"), start=1):
        if not line:
            continue
        yield i, canonical_loads(line)


def _raw_lines(path: Path) -> tuple:
    """(complete_lines, torn_tail) — a non-newline-terminated tail is 'torn'."""
    if not path.is_file():
        return [], None
    text = path.read_text(encoding="utf-8", errors="replace")
    if not text:
        return [], None
    parts = text.split("\n")
    if text.endswith("\n"):
        return parts[:-1], None
    return parts[:-1], parts[-1]


def _last_frame_tick(d: Path, start_tick: int) -> int:
    lines, _ = _raw_lines(d / FRAMES_LOG)
    tick = start_tick - 1
    for line in lines:
        try:
            msg = protocol.decode_message(line)
        except protocol.DecodeError:
            break
        tick = msg.tick
    return tick


# -- validation -----------------------------------------------------------------

def validate_episode(path) -> ValidationReport:
    """Read-only structural check of one episode directory. Problems are
    report entries with record locators, never exceptions."""
    d = Path(path)
    report = ValidationReport(path=str(d))
    if not d.is_dir():
        report.errors.append("not a directory")
        return report

    final = (d / META_FINAL).is_file()
    if not final and not (d / META_PROVISIONAL).is_file():
        report.errors.append("no manifest (meta.json or meta.provisional)")
        return report
    try:
        manifest = read_manifest_dir(d)
    except (ValueError, StoreError) as e:
        report.errors.append(f"manifest unreadable: {e}")
        return report
    finalized = bool(manifest.get("finalized"))
    if final != finalized:
        report.errors.append(f"finalized flag {finalized} inconsistent with "
                             f"{'meta.json' if final else 'meta.provisional'}")
    if not finalized:
        report.warnings.append("not finalized (recording did not stop cleanly)")

    for key in ("episode_id", "session_id", "scene", "scene_digest", "robot",
                "robot_digest", "label", "start_tick", "tick_rate", "start_state"):
        if key not in manifest:
            report.errors.append(f"manifest missing field {key!r}")
    if report.errors:
        return report
    start_tick = manifest["start_tick"]

    # scene/robot copies must still hash to the recorded digests
    for copy_name, digest_key, parser in (
            (SCENE_COPY, "scene_digest", lambda t: parse_scene(parse_config(t)).digest()),
            (ROBOT_COPY, "robot_digest", lambda t: robot_digest_of_text(t))):
        p = d / copy_name
        if not p.is_file():
            report.errors.append(f"{copy_name}: missing")
            continue
        try:
            got = parser(p.read_text(encoding="utf-8"))
        except Exception as e:
            report.errors.append(f"{copy_name}: unparseable: {e}")
            continue
        if got != manifest[digest_key]:
            report.errors.append(f"{copy_name}: digest {got} does not match "
                                 f"manifest {manifest[digest_key]}")

    # frames: decodable, ticks dense from start_tick, seq strictly increasing
    lines, torn = _raw_lines(d / FRAMES_LOG)
    frames = []
    for i, line in enumerate(lines, start=1):
        try:
            msg = protocol.decode_message(line)
            if not isinstance(msg, protocol.StateFrameMsg):
                raise protocol.DecodeError("schema_violation", "not a state record")
        except protocol.DecodeError as e:
            if not finalized and i == len(lines) and torn is None:
                report.warnings.append(f"{FRAMES_LOG}:{i}: truncated tail record "
                                       f"ignored ({e.kind})")
            else:
                report.errors.append(f"{FRAMES_LOG}:{i}: {e}")
            break
        frames.append((i, msg))
    if torn is not None:
        if finalized:
            report.errors.append(f"{FRAMES_LOG}:{len(lines) + 1}: torn record")
        else:
            report.warnings.append(f"{FRAMES_LOG}:{len(lines) + 1}: torn tail ignored")
    prev_seq = None
    for n, (i, msg) in enumerate(frames):
        expected = start_tick + n
        if msg.tick != expected:
            report.errors.append(f"{FRAMES_LOG}:{i}: tick {msg.tick}, expected {expected}")
            break
        if msg.time != msg.tick / manifest["tick_rate"]:
            report.errors.append(f"{FRAMES_LOG}:{i}: time {msg.time} is not "
                                 f"tick/{manifest['tick_rate']}")
        if prev_seq is not None and msg.seq <= prev_seq:
            report.errors.append(f"{FRAMES_LOG}:{i}: seq {msg.seq} not increasing")
        prev_seq = msg.seq
    last_frame_tick = start_tick + len(frames) - 1

    # actions: decodable, ticks non-decreasing and aligned to recorded frames
    lines, torn = _raw_lines(d / ACTIONS_LOG)
    prev_tick = None
    action_count = 0
    for i, line in enumerate(lines, start=1):
        try:
            obj = canonical_loads(line)
            ev = ActionEvent.from_record(obj)
        except (ValueError, KeyError, TypeError):
            if not finalized and i == len(lines) and torn is None:
                report.warnings.append(f"{ACTIONS_LOG}:{i}: truncated tail record ignored")
            else:
                report.errors.append(f"{ACTIONS_LOG}:{i}: undecodable action record")
            break
        action_count += 1
        if prev_tick is not None and ev.tick < prev_tick:
            report.errors.append(f"{ACTIONS_LOG}:{i}: tick {ev.tick} decreases")
        prev_tick = ev.tick
        if ev.tick < start_tick:
            report.errors.append(f"{ACTIONS_LOG}:{i}: tick {ev.tick} before start")
        elif ev.tick > last_frame_tick:
            if finalized:
                report.errors.append(f"{ACTIONS_LOG}:{i}: tick {ev.tick} has no frame")
            else:
                report.warnings.append(f"{ACTIONS_LOG}:{i}: tick {ev.tick} beyond last "
                                       f"frame (truncated recording)")
    if torn is not None:
        if finalized:
            report.errors.append(f"{ACTIONS_LOG}:{len(lines) + 1}: torn record")
        else:
            report.warnings.append(f"{ACTIONS_LOG}:{len(lines) + 1}: torn tail ignored")

    # annotations: well-formed, anchors within the recorded range
    try:
        for i, obj in _read_log(d / ANNOTATIONS_LOG):
            try:
                rec = AnnotationRecord.from_record(obj)
            except (KeyError, TypeError):
                report.errors.append(f"{ANNOTATIONS_LOG}:{i}: undecodable record")
                continue
            if not rec.text:
                report.errors.append(f"{ANNOTATIONS_LOG}:{i}: empty text")
            if rec.anchor is not None:
                t0, t1 = rec.anchor
                if t0 > t1:
                    report.errors.append(f"{ANNOTATIONS_LOG}:{i}: anchor t0 > t1")
                elif not (start_tick <= t0 and t1 <= last_frame_tick):
                    report.errors.append(f"{ANNOTATIONS_LOG}:{i}: anchor outside "
                                         f"[{start_tick}, {last_frame_tick}]")
    except ValueError:
        report.errors.append(f"{ANNOTATIONS_LOG}: undecodable line")

    # media records point at matching blobs
    try:
        for i, obj in _read_log(d / MEDIA_LOG):
            digest = obj.get("content_digest", "")
            blob = d / MEDIA_DIR / digest
            if not blob.is_file():
                report.errors.append(f"{MEDIA_LOG}:{i}: blob {digest} missing")
                continue
            actual = hashlib.sha256(blob.read_bytes()).hexdigest()
            if actual != digest:
                report.errors.append(f"{MEDIA_LOG}:{i}: blob digest {actual} does not "
                                     f"match record {digest}")
            if obj.get("byte_length") != blob.stat().st_size:
                report.errors.append(f"{MEDIA_LOG}:{i}: byte_length mismatch")
    except ValueError:
        report.errors.append(f"{MEDIA_LOG}: undecodable line")

    # finalized manifests must agree with the logs
    if finalized:
        if manifest.get("frame_count") != len(frames):
            report.errors.append(f"manifest frame_count {manifest.get('frame_count')} "
                                 f"!= {len(frames)} frames in log")
        if manifest.get("end_tick") != last_frame_tick:
            report.errors.append(f"manifest end_tick {manifest.get('end_tick')} "
                                 f"!= last frame tick {last_frame_tick}")
        if manifest.get("action_count") != action_count:
            report.errors.append(f"manifest action_count {manifest.get('action_count')} "
                                 f"!= {action_count} actions in log")
        if manifest.get("frame_count") != manifest.get("end_tick") - start_tick + 1:
            report.errors.append("manifest frame_count != end_tick - start_tick + 1")
    return report


def robot_digest_of_text(text: str) -> str:
    from .canonical import canonical_digest
    from .kinematics import robot_record
    return canonical_digest(robot_record(load_robot_model(parse_config(text))))


# -- replay ---------------------------------------------------------------------

@dataclass
class ReplayResult:
    equal: bool
    frames_checked: int
    first_divergent_tick: int | None = None
    detail: str = ""


def _load_episode_world(d: Path, manifest: dict) -> World:
    scene = parse_scene(parse_config((d / SCENE_COPY).read_text(encoding="utf-8"),
                                     path=str(d / SCENE_COPY)))
    model = load_robot_model(parse_config((d / ROBOT_COPY).read_text(encoding="utf-8"),
                                          path=str(d / ROBOT_COPY)))
    world = World(scene, model)
    world.restore_state(manifest["start_state"])
    return world


def _check_registry(manifest: dict, registry) -> None:
    if registry is None:
        return
    digests = {entry.digest for entry in registry.scenes.values()}
    if manifest["scene_digest"] not in digests:
        raise DigestMismatch(
            f"scene {manifest['scene']!r} with digest {manifest['scene_digest'][:12]}… "
            f"is not in the registry (scene changed since recording?)")
    robot = registry.robots.get(manifest["robot"])
    if robot is not None and robot.digest != manifest["robot_digest"]:
        raise DigestMismatch(f"robot {manifest['robot']!r} changed since recording")


def replay_episode(path, registry=None):
    """Re-simulate an episode from its stored scene, start state, and actions.
    Yields (tick, encoded_frame_line); the stream must equal frames.log."""
    d = Path(path)
    report = validate_episode(d)
    if not report.ok:
        raise StoreError("episode does not validate: " + "; ".join(report.errors))
    manifest = read_manifest_dir(d)
    _check_registry(manifest, registry)
    world = _load_episode_world(d, manifest)

    actions_by_tick = {}
    for _, obj in _read_log(d / ACTIONS_LOG):
        try:
            ev = ActionEvent.from_record(obj)
        except (KeyError, TypeError):
            break  # validated: only an unfinalized truncated tail gets here
        actions_by_tick.setdefault(ev.tick, []).append(ev)

    start = manifest["start_tick"]
    end = manifest.get("end_tick")
    if end is None:
        end = _last_frame_tick(d, start)
    seq = manifest["start_state"]["next_seq"]
    for tick in range(start, end + 1):
        for ev in actions_by_tick.get(tick, ()):
            apply_action(world, ev)
        world.step(DT)
        frame = world.snapshot(seq)
        seq += 1
        yield tick, protocol.encode_message(frame.to_message())


def replay_check(path, registry=None) -> ReplayResult:
    """Byte-compare the re-simulated stream against the stored frame log."""
    d = Path(path)
    stored = iter(_raw_lines(d / FRAMES_LOG)[0])
    count = 0
    for tick, line in replay_episode(d, registry):
        recorded = next(stored, None)
        if recorded is None:
            return ReplayResult(False, count, tick, "stored log ends early")
        if line != recorded:
            return ReplayResult(False, count, tick,
                                f"replayed frame differs from stored frame at tick {tick}")
        count += 1
    leftover = next(stored, None)
    if leftover is not None:
        try:
            tick = protocol.decode_message(leftover).tick
        except protocol.DecodeError:
            tick = None
        return ReplayResult(False, count, tick, "stored log has extra frames")
    return ReplayResult(True, count)


# -- export ---------------------------------------------------------------------

@dataclass
class ExportResult:
    out_dir: str
    episode_ids: list
    warning: str = ""


def export_dataset(store: EpisodeStore, out_dir, *, scene=None, robot=None,
                   label=None, finalized_only=True, plots=False) -> ExportResult:
    """Write <out>/index.log plus one aligned log per selected episode. The
    output is a pure function of the store contents: two exports of an
    unchanged store are byte-identical."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    selected = []
    for eid in store.list_episodes():
        manifest = store.manifest_view(eid)
        if finalized_only and not manifest.get("finalized"):
            continue
        if scene is not None and manifest.get("scene") != scene:
            continue
        if robot is not None and manifest.get("robot") != robot:
            continue
        if label is not None and manifest.get("label") != label:
            continue
        selected.append((eid, manifest))

    with open(out / "index.log", "w", encoding="utf-8") as f:
        for _, manifest in selected:
            f.write(canonical_dumps(manifest) + "\n")

    for eid, manifest in selected:
        d = store.episode_dir(eid)
        actions_by_tick = {}
        for _, obj in _read_log(d / ACTIONS_LOG):
            actions_by_tick.setdefault(obj["tick"], []).append(
                {k: obj[k] for k in ("kind", "payload", "client_seq", "origin")})
        rows_path = out / f"{eid}.aligned.log"
        with open(rows_path, "w", encoding="utf-8") as f:
            for line in store.iter_frame_lines(eid):
                msg = protocol.decode_message(line)
                row = {
                    "t": "aligned",
                    "tick": msg.tick,
                    "time": msg.time,
                    "q": list(msg.q),
                    "ee": list(msg.ee),
                    "gripper": msg.gripper,
                    "grasped": msg.grasped,
                    "objects": {k: list(v) for k, v in msg.objects.items()},
                    "action": actions_by_tick.get(msg.tick) or None,
                }
                f.write(canonical_dumps(row) + "\n")
        if plots:
            from . import plots as plots_mod
            plots_mod.render_episode_figure(d, out / f"{eid}.png")

    warning = "" if selected else "empty selection: no episodes matched the filter"
    return ExportResult(out_dir=str(out), episode_ids=[e for e, _ in selected],
                        warning=warning)
