"""Headless session client: drives a live session from a command schedule,
records episodes, and measures command-to-frame latency on loopback.

Commands are scheduled at exact tick boundaries (at_tick), sent ahead of
time, so a scripted run applies the same schedule no matter how network
timing jitters — the basis of the end-to-end determinism checks.
"""

import threading
import time
from dataclasses import dataclass
from urllib.parse import quote

import httpx
from websockets.sync.client import connect as ws_connect

from . import protocol
from .canonical import canonical_dumps
from .configtext import ConfigError, Section, parse as parse_config
from .geometry import normalize_quat

DEFAULT_LEAD_TICKS = 30  # schedule margin between connect and the first command
DEFAULT_TAIL_TICKS = 60  # settle time between the last command and record stop


class ClientError(Exception):
    pass


@dataclass(frozen=True)
class ScriptRow:
    tick: int
    kind: str  # delta | pose | gripper | reset
    params: tuple

    def to_message(self, client_seq: int, at_tick: int):
        if self.kind == "delta":
            d = self.params
            return protocol.EeDelta(client_seq=client_seq, dx=d[0], dy=d[1], dz=d[2],
                                    droll=d[3], dpitch=d[4], dyaw=d[5],
                                    at_tick=at_tick)
        if self.kind == "pose":
            return protocol.PoseTarget(client_seq=client_seq, pose=self.params,
                                       at_tick=at_tick)
        if self.kind == "gripper":
            return protocol.GripperCmd(client_seq=client_seq, action=self.params[0],
                                       at_tick=at_tick)
        if self.kind == "reset":
            return protocol.ResetCmd(client_seq=client_seq, at_tick=at_tick)
        raise ClientError(f"unknown script row kind {self.kind!r}")


def parse_script(doc: Section) -> list:
    """Rows are `at <tick> <command...>`; see docs/FORMAT.md."""
    rows = []
    path = doc.path
    for entry in doc.entries("at"):
        vals = entry.values
        if len(vals) < 2 or isinstance(vals[0], bool) or not isinstance(vals[0], int) \
                or vals[0] < 0 or not isinstance(vals[1], str):
            raise ConfigError("row must be: at <tick> <command...>", path, entry.line)
        tick, word, args = vals[0], vals[1], vals[2:]

        def nums(n, lo=None):
            if len(args) != n or not all(isinstance(a, (int, float))
                                         and not isinstance(a, bool) for a in args):
                raise ConfigError(f"{word} expects {n} numbers", path, entry.line)
            return tuple(float(a) for a in args)

        if word == "delta":
            if len(args) == 3:
                params = nums(3) + (0.0, 0.0, 0.0)
            else:
                params = nums(6)
            rows.append(ScriptRow(tick, "delta", params))
        elif word == "pose":
            vals7 = nums(7)
            quat = normalize_quat(vals7[3:])  # authored values may be rounded
            rows.append(ScriptRow(tick, "pose", vals7[:3] + tuple(float(v) for v in quat)))
        elif word == "gripper":
            if len(args) != 1 or args[0] not in ("open", "close"):
                raise ConfigError("gripper expects open or close", path, entry.line)
            rows.append(ScriptRow(tick, "gripper", (args[0],)))
        elif word == "reset":
            if args:
                raise ConfigError("reset takes no arguments", path, entry.line)
            rows.append(ScriptRow(tick, "reset", ()))
        else:
            raise ConfigError(f"unknown script command {word!r}", path, entry.line)
    rows.sort(key=lambda r: r.tick)
    return rows


def parse_script_file(path) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return parse_script(parse_config(f.read(), path=str(path)))


def create_session(server_url: str, scene: str, robot: str) -> dict:
    resp = httpx.post(f"{server_url.rstrip('/')}/api/v1/sessions",
                      content=canonical_dumps({"scene": scene, "robot": robot}),
                      timeout=10.0)
    if resp.status_code != 201:
        raise ClientError(f"create session failed ({resp.status_code}): {resp.text.strip()}")
    return resp.json()


class SessionClient:
    """Synchronous wire-protocol client with a background receive thread."""

    def __init__(self, server_url: str, session_id: str, contributor: str = "script",
                 client_kind: str = "script"):
        self.server_url = server_url.rstrip("/")
        self.session_id = session_id
        self.contributor = contributor
        ws_base = self.server_url.replace("http", "ws", 1)
        self.ws = ws_connect(
            f"{ws_base}/ws/v1/sessions/{session_id}?contributor={quote(contributor)}",
            open_timeout=10)
        self._client_seq = 0
        self._cond = threading.Condition()
        self._frames = []
        self._events = []
        self._errors = []
        self._closed = False

        self.ws.send(protocol.encode_message(protocol.Hello(
            protocol_version=protocol.PROTOCOL_VERSION, client_kind=client_kind)))
        reply = protocol.decode_message(self.ws.recv(timeout=10))
        if isinstance(reply, protocol.ErrorMsg):
            raise ClientError(f"handshake rejected: {reply.code}: {reply.detail}")
        if not isinstance(reply, protocol.HelloAck):
            raise ClientError(f"unexpected handshake reply {type(reply).__name__}")
        self.ack = reply
        self._recv_thread = threading.Thread(target=self._recv_loop, daemon=True)
        self._recv_thread.start()

    # -- receive side -----------------------------------------------------------

    def _recv_loop(self):
        try:
            while True:
                raw = self.ws.recv()
                msg = protocol.decode_message(raw)
                with self._cond:
                    if isinstance(msg, protocol.StateFrameMsg):
                        self._frames.append((time.perf_counter(), msg))
                    elif isinstance(msg, protocol.RecordingEvent):
                        self._events.append(msg)
                    elif isinstance(msg, protocol.ErrorMsg):
                        self._errors.append(msg)
                    self._cond.notify_all()
        except Exception:
            with self._cond:
                self._closed = True
                self._cond.notify_all()

    def _raise_on_error(self):
        if self._errors:
            err = self._errors[0]
            raise ClientError(f"server error: {err.code}: {err.detail}")

    def errors(self) -> list:
        with self._cond:
            return list(self._errors)

    def latest_frame(self, timeout: float = 5.0):
        deadline = time.monotonic() + timeout
        with self._cond:
            while not self._frames:
                self._raise_on_error()
                if self._closed or not self._cond.wait(deadline - time.monotonic()):
                    raise ClientError("no frame received")
            return self._frames[-1][1]

    def wait_frame(self, predicate, timeout: float = 10.0):
        """Block until a newly received frame satisfies the predicate."""
        deadline = time.monotonic() + timeout
        seen = 0
        with self._cond:
            while True:
                self._raise_on_error()
                while seen < len(self._frames):
                    stamp, frame = self._frames[seen]
                    seen += 1
                    if predicate(frame):
                        return stamp, frame
                remaining = deadline - time.monotonic()
                if self._closed or remaining <= 0 or not self._cond.wait(remaining):
                    self._raise_on_error()
                    raise ClientError("timed out waiting for a frame")

    def wait_event(self, predicate, timeout: float = 30.0):
        deadline = time.monotonic() + timeout
        seen = 0
        with self._cond:
            while True:
                self._raise_on_error()
                while seen < len(self._events):
                    ev = self._events[seen]
                    seen += 1
                    if predicate(ev):
                        return ev
                remaining = deadline - time.monotonic()
                if self._closed or remaining <= 0 or not self._cond.wait(remaining):
                    self._raise_on_error()
                    raise ClientError("timed out waiting for an event")

    # -- send side ----------------------------------------------------------------

    def next_seq(self) -> int:
        self._client_seq += 1
        return self._client_seq

    def send(self, msg, check: bool = True) -> None:
        self.ws.send(protocol.encode_message(msg, check=check))

    # -- high-level flows ------------------------------------------------------------

    def run_script(self, rows, label: str, lead: int = DEFAULT_LEAD_TICKS,
                   tail: int = DEFAULT_TAIL_TICKS) -> str:
        """Record an episode driven by the schedule. All commands are sent
        up front with absolute at_tick values; row ticks are relative to the
        recording start boundary."""
        base = lead
        self.send(protocol.RecordStart(client_seq=self.next_seq(), label=label,
                                       at_tick=base))
        last = rows[-1].tick if rows else 0
        for row in rows:
            # check=False: server-side validation is authoritative; a script
            # carrying an out-of-range delta must be rejected by the server
            self.send(row.to_message(self.next_seq(), base + row.tick), check=False)
        stop_tick = base + last + tail
        self.send(protocol.RecordStop(client_seq=self.next_seq(), at_tick=stop_tick))

        started = self.wait_event(lambda e: e.event == "started",
                                  timeout=10.0 + lead / 30.0)
        stopped = self.wait_event(
            lambda e: e.event == "stopped" and e.episode_id == started.episode_id,
            timeout=30.0 + stop_tick / 30.0)
        return stopped.episode_id

    def settle(self, stable_frames: int = 4, timeout: float = 20.0) -> None:
        """Wait until the arm stops moving (identical q across consecutive
        streamed frames)."""
        state = {"last": None, "count": 0}

        def stable(frame):
            if state["last"] is not None and frame.q == state["last"]:
                state["count"] += 1
            else:
                state["count"] = 0
            state["last"] = frame.q
            return state["count"] >= stable_frames

        self.wait_frame(stable, timeout=timeout)

    def measure_latency(self, probes: int = 20) -> list:
        """Command-send to first-reflecting-frame intervals, in seconds. Sends
        small immediate deltas from an idle arm and waits for the first frame
        whose joint config moved."""
        samples = []
        sign = 1.0
        for _ in range(probes):
            self.settle()
            base = self.latest_frame()
            t0 = time.perf_counter()
            self.send(protocol.EeDelta(client_seq=self.next_seq(), dx=0.004 * sign))
            stamp, _ = self.wait_frame(lambda f: f.seq > base.seq and f.q != base.q,
                                       timeout=5.0)
            samples.append(stamp - t0)
            sign = -sign
        return samples

    def close(self) -> None:
        try:
            self.ws.close()
        except Exception:
            pass
