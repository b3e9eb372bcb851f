"""Wire protocol v1: versioned self-describing messages for the client/server stream.

Every frame is one canonical-form object (sorted keys, no whitespace, UTF-8)
carrying a type tag under "t". Command messages (teleop and control) carry a
per-connection monotone client_seq and may carry an optional at_tick to
schedule application at an exact tick boundary, which is what makes scripted
sessions reproducible.
"""

import math
from dataclasses import dataclass

from .canonical import canonical_dumps, canonical_loads

PROTOCOL_VERSION = 1
SUPPORTED_VERSIONS = frozenset({PROTOCOL_VERSION})

DELTA_MAX_M = 0.1  # per-message translation bound, per axis
DELTA_MAX_RAD = 0.5  # per-message rotation bound, per axis
QUAT_WIRE_TOL = 1e-6

# Wire error codes.
ERR_VERSION_MISMATCH = "version_mismatch"
ERR_PROTOCOL_VIOLATION = "protocol_violation"
ERR_SCHEMA_VIOLATION = "schema_violation"
ERR_OUT_OF_RANGE = "out_of_range"
ERR_STALE_COMMAND = "stale_command"
ERR_SESSION_CLOSED = "session_closed"


class DecodeError(Exception):
    """Typed decode failure; kind is one of malformed_text, unknown_type,
    schema_violation, out_of_range."""

    def __init__(self, kind: str, detail: str):
        self.kind = kind
        self.detail = detail
        super().__init__(f"{kind}: {detail}")

    @property
    def wire_code(self) -> str:
        return ERR_OUT_OF_RANGE if self.kind == "out_of_range" else ERR_SCHEMA_VIOLATION


class EncodeError(ValueError):
    pass


@dataclass(frozen=True)
class Hello:
    protocol_version: int
    client_kind: str


@dataclass(frozen=True)
class HelloAck:
    session_id: str
    scene_digest: str
    dt: float
    stream_rate_hz: int


@dataclass(frozen=True)
class EeDelta:
    client_seq: int
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    droll: float = 0.0
    dpitch: float = 0.0
    dyaw: float = 0.0
    at_tick: int | None = None


@dataclass(frozen=True)
class PoseTarget:
    client_seq: int
    pose: tuple  # (x, y, z, qw, qx, qy, qz)
    at_tick: int | None = None


@dataclass(frozen=True)
class GripperCmd:
    client_seq: int
    action: str  # open | close
    at_tick: int | None = None


@dataclass(frozen=True)
class ResetCmd:
    client_seq: int
    at_tick: int | None = None


@dataclass(frozen=True)
class RecordStart:
    client_seq: int
    label: str
    at_tick: int | None = None


@dataclass(frozen=True)
class RecordStop:
    client_seq: int
    at_tick: int | None = None


@dataclass(frozen=True)
class StateFrameMsg:
    tick: int
    time: float
    seq: int
    q: tuple
    ee: tuple  # (x, y, z, qw, qx, qy, qz)
    gripper: str  # open | closed
    grasped: str | None
    objects: dict  # id -> 7-tuple


@dataclass(frozen=True)
class RecordingEvent:
    episode_id: str
    event: str  # started | stopped
    tick: int


@dataclass(frozen=True)
class ErrorMsg:
    code: str
    detail: str


@dataclass(frozen=True)
class Ping:
    nonce: int


@dataclass(frozen=True)
class Pong:
    nonce: int


TELEOP_TYPES = (EeDelta, PoseTarget, GripperCmd)
CONTROL_TYPES = (ResetCmd, RecordStart, RecordStop)
COMMAND_TYPES = TELEOP_TYPES + CONTROL_TYPES


def _finite(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) \
        and math.isfinite(value)


def _check_pose7(pose) -> str | None:
    if len(pose) != 7 or not all(_finite(v) for v in pose):
        return "pose needs 7 finite numbers"
    norm = math.sqrt(sum(v * v for v in pose[3:]))
    if abs(norm - 1.0) > QUAT_WIRE_TOL:
        return f"pose quaternion norm {norm} is not unit"
    return None


def _validate(m) -> tuple | None:
    """Returns (error_kind, detail) when the message violates its invariants."""
    if isinstance(m, Hello):
        if not isinstance(m.protocol_version, int) or isinstance(m.protocol_version, bool):
            return "schema_violation", "protocol_version must be an integer"
        if not isinstance(m.client_kind, str) or not m.client_kind:
            return "schema_violation", "client_kind must be a non-empty string"
    elif isinstance(m, HelloAck):
        if not _finite(m.dt) or m.dt <= 0:
            return "schema_violation", "dt must be a positive number"
    elif isinstance(m, COMMAND_TYPES):
        if not isinstance(m.client_seq, int) or isinstance(m.client_seq, bool) or m.client_seq < 0:
            return "schema_violation", "client_seq must be a non-negative integer"
        if m.at_tick is not None and (not isinstance(m.at_tick, int)
                                      or isinstance(m.at_tick, bool) or m.at_tick < 0):
            return "schema_violation", "at_tick must be a non-negative integer"
        if isinstance(m, EeDelta):
            for name in ("dx", "dy", "dz", "droll", "dpitch", "dyaw"):
                if not _finite(getattr(m, name)):
                    return "schema_violation", f"{name} must be a finite number"
            for name in ("dx", "dy", "dz"):
                if abs(getattr(m, name)) > DELTA_MAX_M:
                    return "out_of_range", f"{name} exceeds {DELTA_MAX_M} m"
            for name in ("droll", "dpitch", "dyaw"):
                if abs(getattr(m, name)) > DELTA_MAX_RAD:
                    return "out_of_range", f"{name} exceeds {DELTA_MAX_RAD} rad"
        elif isinstance(m, PoseTarget):
            bad = _check_pose7(m.pose)
            if bad:
                return "schema_violation", bad
        elif isinstance(m, GripperCmd):
            if m.action not in ("open", "close"):
                return "schema_violation", "gripper action must be open or close"
        elif isinstance(m, RecordStart):
            if not isinstance(m.label, str) or not m.label:
                return "schema_violation", "label must be a non-empty string"
    elif isinstance(m, StateFrameMsg):
        for name in ("tick", "seq"):
            v = getattr(m, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                return "schema_violation", f"{name} must be a non-negative integer"
        if not _finite(m.time):
            return "schema_violation", "time must be finite"
        if not m.q or not all(_finite(v) for v in m.q):
            return "schema_violation", "q must be a non-empty list of finite numbers"
        bad = _check_pose7(m.ee)
        if bad:
            return "schema_violation", f"ee: {bad}"
        if m.gripper not in ("open", "closed"):
            return "schema_violation", "gripper must be open or closed"
        if m.grasped is not None and (not isinstance(m.grasped, str) or not m.grasped):
            return "schema_violation", "grasped must be null or a non-empty string"
        for oid, pose in m.objects.items():
            if not isinstance(oid, str) or not oid:
                return "schema_violation", "object ids must be non-empty strings"
            bad = _check_pose7(pose)
            if bad:
                return "schema_violation", f"object {oid!r}: {bad}"
    elif isinstance(m, RecordingEvent):
        if m.event not in ("started", "stopped"):
            return "schema_violation", "event must be started or stopped"
        if not isinstance(m.tick, int) or isinstance(m.tick, bool):
            return "schema_violation", "tick must be an integer"
    elif isinstance(m, ErrorMsg):
        if not isinstance(m.code, str) or not m.code:
            return "schema_violation", "code must be a non-empty string"
        if not isinstance(m.detail, str):
            return "schema_violation", "detail must be a string"
    elif isinstance(m, (Ping, Pong)):
        if not isinstance(m.nonce, int) or isinstance(m.nonce, bool):
            return "schema_violation", "nonce must be an integer"
    else:
        return "schema_violation", f"unknown message object {type(m).__name__}"
    return None


def _to_obj(m) -> dict:
    if isinstance(m, Hello):
        return {"t": "hello", "protocol_version": m.protocol_version,
                "client_kind": m.client_kind}
    if isinstance(m, HelloAck):
        return {"t": "hello_ack", "session_id": m.session_id,
                "scene_digest": m.scene_digest, "dt": float(m.dt),
                "stream_rate_hz": m.stream_rate_hz}
    if isinstance(m, EeDelta):
        obj = {"t": "ee_delta", "client_seq": m.client_seq,
               "dx": float(m.dx), "dy": float(m.dy), "dz": float(m.dz),
               "droll": float(m.droll), "dpitch": float(m.dpitch),
               "dyaw": float(m.dyaw)}
    elif isinstance(m, PoseTarget):
        obj = {"t": "pose_target", "client_seq": m.client_seq,
               "pose": [float(v) for v in m.pose]}
    elif isinstance(m, GripperCmd):
        obj = {"t": "gripper", "client_seq": m.client_seq, "action": m.action}
    elif isinstance(m, ResetCmd):
        obj = {"t": "reset", "client_seq": m.client_seq}
    elif isinstance(m, RecordStart):
        obj = {"t": "record_start", "client_seq": m.client_seq, "label": m.label}
    elif isinstance(m, RecordStop):
        obj = {"t": "record_stop", "client_seq": m.client_seq}
    elif isinstance(m, StateFrameMsg):
        return {"t": "state", "tick": m.tick, "time": float(m.time), "seq": m.seq,
                "q": [float(v) for v in m.q], "ee": [float(v) for v in m.ee],
                "gripper": m.gripper, "grasped": m.grasped,
                "objects": {k: [float(v) for v in p] for k, p in m.objects.items()}}
    elif isinstance(m, RecordingEvent):
        return {"t": "recording", "episode_id": m.episode_id, "event": m.event,
                "tick": m.tick}
    elif isinstance(m, ErrorMsg):
        return {"t": "error", "code": m.code, "detail": m.detail}
    elif isinstance(m, Ping):
        return {"t": "ping", "nonce": m.nonce}
    elif isinstance(m, Pong):
        return {"t": "pong", "nonce": m.nonce}
    else:
        raise EncodeError(f"unknown message object {type(m).__name__}")
    if m.at_tick is not None:
        obj["at_tick"] = m.at_tick
    return obj


def encode_message(m, check: bool = True) -> str:
    """Canonical text encoding of a message. With check=True (the default)
    the message must satisfy its type invariants."""
    if check:
        bad = _validate(m)
        if bad:
            raise EncodeError(f"{bad[0]}: {bad[1]}")
    try:
        return canonical_dumps(_to_obj(m))
    except ValueError as e:
        raise EncodeError(str(e)) from None


class _Fields:
    """Field extractor that enforces presence, primitive types, and no extras."""

    def __init__(self, obj: dict):
        self.obj = dict(obj)
        self.obj.pop("t")

    def _take(self, key):
        if key not in self.obj:
            raise DecodeError("schema_violation", f"missing field {key!r}")
        return self.obj.pop(key)

    def integer(self, key) -> int:
        v = self._take(key)
        if not isinstance(v, int) or isinstance(v, bool):
            raise DecodeError("schema_violation", f"{key!r} must be an integer")
        return v

    def opt_integer(self, key):
        if key not in self.obj:
            return None
        return self.integer(key)

    def number(self, key) -> float:
        v = self._take(key)
        if not _finite(v):
            raise DecodeError("schema_violation", f"{key!r} must be a finite number")
        return float(v)

    def string(self, key) -> str:
        v = self._take(key)
        if not isinstance(v, str):
            raise DecodeError("schema_violation", f"{key!r} must be a string")
        return v

    def opt_string(self, key):
        v = self._take(key)
        if v is None:
            return None
        if not isinstance(v, str):
            raise DecodeError("schema_violation", f"{key!r} must be a string or null")
        return v

    def numbers(self, key, count=None) -> tuple:
        v = self._take(key)
        if not isinstance(v, list) or not all(_finite(x) for x in v):
            raise DecodeError("schema_violation", f"{key!r} must be a list of finite numbers")
        if count is not None and len(v) != count:
            raise DecodeError("schema_violation", f"{key!r} must have {count} elements")
        return tuple(float(x) for x in v)

    def mapping(self, key) -> dict:
        v = self._take(key)
        if not isinstance(v, dict):
            raise DecodeError("schema_violation", f"{key!r} must be an object")
        return v

    def done(self):
        if self.obj:
            extra = sorted(self.obj)[0]
            raise DecodeError("schema_violation", f"unknown field {extra!r}")


def decode_message(text: str):
    """Strict decode: unknown tag, missing/extra/mistyped fields, and
    out-of-range values are typed errors; no input can abort the process."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DecodeError("malformed_text", f"not UTF-8: {e}") from None
    try:
        obj = canonical_loads(text)
    except (ValueError, RecursionError) as e:
        raise DecodeError("malformed_text", f"not a valid message: {e}") from None
    if not isinstance(obj, dict):
        raise DecodeError("malformed_text", "message must be an object")
    tag = obj.get("t")
    if not isinstance(tag, str):
        raise DecodeError("unknown_type", "missing type tag 't'")

    f = _Fields(obj)
    if tag == "hello":
        m = Hello(protocol_version=f.integer("protocol_version"),
                  client_kind=f.string("client_kind"))
    elif tag == "hello_ack":
        m = HelloAck(session_id=f.string("session_id"),
                     scene_digest=f.string("scene_digest"),
                     dt=f.number("dt"), stream_rate_hz=f.integer("stream_rate_hz"))
    elif tag == "ee_delta":
        m = EeDelta(client_seq=f.integer("client_seq"),
                    dx=f.number("dx"), dy=f.number("dy"), dz=f.number("dz"),
                    droll=f.number("droll"), dpitch=f.number("dpitch"),
                    dyaw=f.number("dyaw"), at_tick=f.opt_integer("at_tick"))
    elif tag == "pose_target":
        m = PoseTarget(client_seq=f.integer("client_seq"),
                       pose=f.numbers("pose", 7), at_tick=f.opt_integer("at_tick"))
    elif tag == "gripper":
        m = GripperCmd(client_seq=f.integer("client_seq"),
                       action=f.string("action"), at_tick=f.opt_integer("at_tick"))
    elif tag == "reset":
        m = ResetCmd(client_seq=f.integer("client_seq"), at_tick=f.opt_integer("at_tick"))
    elif tag == "record_start":
        m = RecordStart(client_seq=f.integer("client_seq"), label=f.string("label"),
                        at_tick=f.opt_integer("at_tick"))
    elif tag == "record_stop":
        m = RecordStop(client_seq=f.integer("client_seq"), at_tick=f.opt_integer("at_tick"))
    elif tag == "state":
        objects = f.mapping("objects")
        parsed = {}
        for oid in objects:
            pose = objects[oid]
            if not isinstance(pose, list) or len(pose) != 7 \
                    or not all(_finite(v) for v in pose):
                raise DecodeError("schema_violation",
                                  f"object {oid!r} pose must be 7 finite numbers")
            parsed[oid] = tuple(float(v) for v in pose)
        m = StateFrameMsg(tick=f.integer("tick"), time=f.number("time"),
                          seq=f.integer("seq"), q=f.numbers("q"),
                          ee=f.numbers("ee", 7), gripper=f.string("gripper"),
                          grasped=f.opt_string("grasped"), objects=parsed)
    elif tag == "recording":
        m = RecordingEvent(episode_id=f.string("episode_id"), event=f.string("event"),
                           tick=f.integer("tick"))
    elif tag == "error":
        m = ErrorMsg(code=f.string("code"), detail=f.string("detail"))
    elif tag == "ping":
        m = Ping(nonce=f.integer("nonce"))
    elif tag == "pong":
        m = Pong(nonce=f.integer("nonce"))
    else:
        raise DecodeError("unknown_type", f"unknown type tag {tag!r}")
    f.done()

    bad = _validate(m)
    if bad:
        raise DecodeError(bad[0], bad[1])
    return m


def negotiate(first_message, *, session_id: str, scene_digest: str, dt: float,
              stream_rate_hz: int, supported=SUPPORTED_VERSIONS):
    """Handshake: Hello in, HelloAck or ErrorMsg out. Anything but a Hello is a
    protocol violation; an unsupported version is a version mismatch. On an
    error result the server closes the connection."""
    if not isinstance(first_message, Hello):
        return ErrorMsg(code=ERR_PROTOCOL_VIOLATION,
                        detail="first message must be hello")
    if first_message.protocol_version not in supported:
        return ErrorMsg(code=ERR_VERSION_MISMATCH,
                        detail=f"protocol version {first_message.protocol_version} "
                               f"unsupported; supported: {sorted(supported)}")
    return HelloAck(session_id=session_id, scene_digest=scene_digest,
                    dt=dt, stream_rate_hz=stream_rate_hz)
