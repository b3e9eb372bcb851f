"""HTTP + websocket surface of the demo service.

All HTTP bodies are canonical-form objects. The websocket endpoint speaks
wire-protocol v1 with a Hello/HelloAck handshake; handshake failures close
the connection, anything later answers with an Error message and keeps it
open.
"""

import asyncio
import logging
import secrets
import time
from contextlib import asynccontextmanager

from fastapi import FastAPI, Request, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse, StreamingResponse

from .. import protocol
from ..canonical import canonical_dumps, canonical_loads
from ..catalog import load_catalog
from ..kinematics import robot_record
from ..store import EpisodeStore, StoreError
from .config import ServiceConfig
from .session import STREAM_RATE_HZ, Session, SessionError

logger = logging.getLogger(__name__)


class CanonicalResponse(JSONResponse):
    def render(self, content) -> bytes:
        return (canonical_dumps(content) + "\n").encode("utf-8")


def _error(status: int, code: str, detail: str) -> CanonicalResponse:
    return CanonicalResponse({"code": code, "detail": detail}, status_code=status)


def create_app(config: ServiceConfig) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        for session in list(app.state.sessions.values()):
            manifest = session.close()
            if manifest is not None:
                logger.info("finalized episode %s on shutdown", manifest["episode_id"])
        app.state.sessions.clear()

    app = FastAPI(lifespan=lifespan, default_response_class=CanonicalResponse)
    app.state.config = config
    app.state.catalog = load_catalog(config.data_dir)
    app.state.store = EpisodeStore(config.data_dir)
    app.state.sessions = {}

    def _session_or_none(sid: str):
        return app.state.sessions.get(sid)

    async def _read_object(request: Request):
        body = await request.body()
        try:
            obj = canonical_loads(body.decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            return None
        return obj if isinstance(obj, dict) else None

    # -- catalog ---------------------------------------------------------------

    @app.get("/api/v1/scenes")
    async def list_scenes():
        scenes = []
        for name in sorted(app.state.catalog.scenes):
            entry = app.state.catalog.scenes[name]
            record = entry.spec.to_record()
            record["digest"] = entry.digest
            scenes.append(record)
        return {"scenes": scenes}

    @app.get("/api/v1/robots")
    async def list_robots():
        robots = []
        for name in sorted(app.state.catalog.robots):
            entry = app.state.catalog.robots[name]
            record = robot_record(entry.model)
            record["digest"] = entry.digest
            robots.append(record)
        return {"robots": robots}

    # -- sessions ----------------------------------------------------------------

    @app.post("/api/v1/sessions")
    async def create_session(request: Request):
        obj = await _read_object(request)
        if obj is None or not isinstance(obj.get("scene"), str) \
                or not isinstance(obj.get("robot"), str):
            return _error(400, "schema_violation", "body must be {scene, robot}")
        catalog = app.state.catalog
        scene_entry = catalog.scenes.get(obj["scene"])
        if scene_entry is None:
            return _error(404, "unknown_scene", f"no scene {obj['scene']!r}")
        robot_entry = catalog.robots.get(obj["robot"])
        if robot_entry is None:
            return _error(404, "unknown_robot", f"no robot {obj['robot']!r}")
        if robot_entry.model.n != len(scene_entry.spec.robot_initial):
            return _error(409, "incompatible_robot",
                          f"scene {scene_entry.name!r} initializes "
                          f"{len(scene_entry.spec.robot_initial)} joints; robot "
                          f"{robot_entry.name!r} has {robot_entry.model.n}")
        open_sessions = [s for s in app.state.sessions.values() if s.state != "closed"]
        if len(open_sessions) >= app.state.config.max_sessions:
            return _error(429, "session_capacity",
                          f"server at capacity ({app.state.config.max_sessions} sessions)")
        session_id = f"s-{secrets.token_hex(6)}"
        session = Session(session_id=session_id, scene_entry=scene_entry,
                          robot_entry=robot_entry, store=app.state.store,
                          created_at=int(time.time() * 1000))
        session.task = asyncio.get_running_loop().create_task(session.run())
        app.state.sessions[session_id] = session
        return CanonicalResponse(session.descriptor(), status_code=201)

    @app.get("/api/v1/sessions")
    async def list_sessions():
        return {"sessions": [s.descriptor() for s in app.state.sessions.values()]}

    @app.post("/api/v1/sessions/{sid}/recording/start")
    async def recording_start(sid: str, request: Request):
        session = _session_or_none(sid)
        if session is None:
            return _error(404, "unknown_session", f"no session {sid!r}")
        obj = await _read_object(request)
        if obj is None or not isinstance(obj.get("label"), str) or not obj["label"]:
            return _error(400, "schema_violation", "body must be {label}")
        try:
            result = await session.request_record_start(
                obj["label"], contributor=request.headers.get("X-Contributor"))
        except SessionError as e:
            return _error(409, e.code, e.detail)
        return CanonicalResponse(result, status_code=201)

    @app.post("/api/v1/sessions/{sid}/recording/stop")
    async def recording_stop(sid: str):
        session = _session_or_none(sid)
        if session is None:
            return _error(404, "unknown_session", f"no session {sid!r}")
        try:
            manifest = await session.request_record_stop()
        except SessionError as e:
            return _error(409, e.code, e.detail)
        return manifest

    # -- ingestion -----------------------------------------------------------------

    @app.post("/api/v1/annotations")
    async def submit_annotation(request: Request):
        obj = await _read_object(request)
        if obj is None:
            return _error(400, "schema_violation", "body must be a canonical object")
        target = obj.get("target")
        kind = obj.get("kind")
        text = obj.get("text")
        anchor = obj.get("anchor")
        if not isinstance(target, str) or not isinstance(kind, str) \
                or not isinstance(text, str):
            return _error(400, "schema_violation",
                          "body must be {target, kind, text, anchor?}")
        if anchor is not None and (not isinstance(anchor, list) or len(anchor) != 2
                                   or not all(isinstance(v, int) for v in anchor)):
            return _error(400, "schema_violation", "anchor must be [t0, t1]")
        author = request.headers.get("X-Contributor", "anonymous")
        try:
            record = app.state.store.add_annotation(
                target, author=author, text=text, kind=kind, anchor=anchor,
                known_session_ids=set(app.state.sessions))
        except StoreError as e:
            status = 404 if "unknown" in str(e) else 400
            return _error(status, "annotation_rejected", str(e))
        return CanonicalResponse(record.to_record(), status_code=201)

    @app.post("/api/v1/media/{target}")
    async def upload_media(target: str, request: Request):
        cap = app.state.config.media_cap_bytes
        declared_length = request.headers.get("content-length")
        if declared_length is not None and declared_length.isdigit() \
                and int(declared_length) > cap:
            return _error(413, "media_too_large",
                          f"{declared_length} bytes exceeds cap {cap}")
        data = await request.body()
        if len(data) > cap:
            return _error(413, "media_too_large", f"{len(data)} bytes exceeds cap {cap}")
        metadata = {
            "contributor": request.headers.get("X-Contributor", "anonymous"),
        }
        session = _session_or_none(target)
        if session is not None:
            metadata["scene"] = session.scene_entry.name
            metadata["embodiment"] = session.robot_entry.name
        else:
            try:
                manifest = app.state.store.read_manifest(target)
                metadata["scene"] = manifest.get("scene")
                metadata["embodiment"] = manifest.get("robot")
                metadata["label"] = manifest.get("label")
            except StoreError:
                pass
        duration = request.headers.get("X-Duration-Seconds")
        if duration is not None:
            try:
                metadata["duration_s"] = float(duration)
            except ValueError:
                return _error(400, "schema_violation", "X-Duration-Seconds not a number")
        try:
            record = app.state.store.put_media(
                target, data,
                declared_mime=request.headers.get("content-type",
                                                  "application/octet-stream"),
                source=request.headers.get("X-Source", "upload"),
                metadata=metadata,
                declared_digest=request.headers.get("X-Declared-Digest"),
                cap_bytes=cap,
                known_session_ids=set(app.state.sessions))
        except StoreError as e:
            text = str(e)
            if "unknown" in text:
                return _error(404, "unknown_target", text)
            if "exceeds cap" in text:
                return _error(413, "media_too_large", text)
            return _error(400, "media_rejected", text)
        return CanonicalResponse(record.to_record(), status_code=201)

    # -- episodes ----------------------------------------------------------------

    @app.get("/api/v1/episodes")
    async def list_episodes():
        store = app.state.store
        return {"episodes": [store.manifest_view(eid) for eid in store.list_episodes()]}

    @app.get("/api/v1/episodes/{eid}")
    async def get_episode(eid: str):
        try:
            return app.state.store.manifest_view(eid)
        except StoreError as e:
            return _error(404, "unknown_episode", str(e))

    @app.get("/api/v1/episodes/{eid}/frames")
    async def episode_frames(eid: str):
        store = app.state.store
        if not store.episode_dir(eid).is_dir():
            return _error(404, "unknown_episode", f"no episode {eid!r}")

        def _lines():
            for line in store.iter_frame_lines(eid):
                yield line + "\n"

        return StreamingResponse(_lines(), media_type="text/plain; charset=utf-8")

    # -- streaming ------------------------------------------------------------------

    async def _pump(conn, websocket: WebSocket):
        try:
            while True:
                text = await conn.next_text()
                if text is None:
                    break
                await websocket.send_text(text)
        except Exception:
            conn.close()

    @app.websocket("/ws/v1/sessions/{sid}")
    async def ws_session(websocket: WebSocket, sid: str):
        await websocket.accept()
        try:
            raw = await websocket.receive_text()
        except WebSocketDisconnect:
            return
        except Exception:
            await websocket.close()
            return
        try:
            first = protocol.decode_message(raw)
        except protocol.DecodeError as e:
            await websocket.send_text(protocol.encode_message(protocol.ErrorMsg(
                code=protocol.ERR_PROTOCOL_VIOLATION,
                detail=f"handshake must be hello: {e.detail}")))
            await websocket.close()
            return
        session = _session_or_none(sid)
        if session is None or session.state == "closed":
            await websocket.send_text(protocol.encode_message(protocol.ErrorMsg(
                code=protocol.ERR_SESSION_CLOSED, detail=f"no live session {sid!r}")))
            await websocket.close()
            return
        reply = protocol.negotiate(first, session_id=session.id,
                                   scene_digest=session.scene_entry.digest,
                                   dt=session.dt, stream_rate_hz=STREAM_RATE_HZ)
        await websocket.send_text(protocol.encode_message(reply))
        if isinstance(reply, protocol.ErrorMsg):
            await websocket.close()
            return

        conn = session.attach(contributor=websocket.query_params.get("contributor"))
        sender = asyncio.get_running_loop().create_task(_pump(conn, websocket))
        try:
            while True:
                raw = await websocket.receive_text()
                try:
                    msg = protocol.decode_message(raw)
                except protocol.DecodeError as e:
                    conn.push(protocol.encode_message(protocol.ErrorMsg(
                        code=e.wire_code, detail=e.detail)))
                    continue
                if isinstance(msg, protocol.Ping):
                    conn.push(protocol.encode_message(protocol.Pong(nonce=msg.nonce)))
                elif isinstance(msg, protocol.COMMAND_TYPES):
                    if msg.client_seq <= conn.last_client_seq:
                        conn.push(protocol.encode_message(protocol.ErrorMsg(
                            code=protocol.ERR_STALE_COMMAND,
                            detail=f"client_seq {msg.client_seq} is not greater than "
                                   f"{conn.last_client_seq}")))
                        continue
                    conn.last_client_seq = msg.client_seq
                    session.enqueue_command(conn.id, msg, contributor=conn.contributor)
                else:
                    conn.push(protocol.encode_message(protocol.ErrorMsg(
                        code=protocol.ERR_PROTOCOL_VIOLATION,
                        detail=f"{type(msg).__name__} is not a client message")))
        except WebSocketDisconnect:
            pass
        except Exception:
            logger.exception("websocket handler failed for %s", sid)
        finally:
            session.detach(conn)
            sender.cancel()

    return app
