"""Per-session real-time loop: one fixed-timestep world, ordered command
application, episode recording, and decimated state broadcast.

A session's world is owned by exactly one loop (single-writer). Connection
handlers validate messages and enqueue them; every command is applied at a
tick boundary, either the next one or the exact boundary named by its
at_tick field, in arrival order within a boundary. That tick-indexed
application is what makes scripted sessions reproduce bit for bit.
"""

import asyncio
import heapq
import logging
from collections import deque

from .. import protocol
from ..store import EpisodeStore, StoreError, apply_action, command_to_action
from ..world import TICK_RATE, World

STREAM_DECIMATION = 3  # 60 Hz sim -> 20 Hz state stream
STREAM_RATE_HZ = TICK_RATE // STREAM_DECIMATION
MAX_CATCHUP_TICKS = 5  # late ticks executed back to back before rebasing
OUTBOUND_FRAME_LIMIT = 64  # per-client queued state frames; oldest dropped

logger = logging.getLogger(__name__)

LOBBY = "lobby"
LIVE = "live"
CLOSED = "closed"


class SessionError(Exception):
    def __init__(self, code: str, detail: str):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}")


class ClientConn:
    """Outbound queue for one attached client. State frames beyond the limit
    are dropped oldest-first; other message types are never dropped."""

    def __init__(self, conn_id: str, contributor=None):
        self.id = conn_id
        self.contributor = contributor
        self.last_client_seq = -1
        self.closed = False
        self._items = deque()  # (text, is_frame)
        self._frames = 0
        self._event = asyncio.Event()

    def push(self, text: str, is_frame: bool = False) -> None:
        if self.closed:
            return
        self._items.append((text, is_frame))
        if is_frame:
            self._frames += 1
            while self._frames > OUTBOUND_FRAME_LIMIT:
                for idx, (_, f) in enumerate(self._items):
                    if f:
                        del self._items[idx]
                        self._frames -= 1
                        break
        self._event.set()

    async def next_text(self):
        while not self._items:
            if self.closed:
                return None
            self._event.clear()
            await self._event.wait()
        text, is_frame = self._items.popleft()
        if is_frame:
            self._frames -= 1
        return text

    def close(self) -> None:
        self.closed = True
        self._event.set()


class Session:
    def __init__(self, *, session_id: str, scene_entry, robot_entry,
                 store: EpisodeStore, created_at: int):
        self.id = session_id
        self.scene_entry = scene_entry
        self.robot_entry = robot_entry
        self.store = store
        self.created_at = created_at
        self.state = LOBBY
        self.world = World(scene_entry.spec, robot_entry.model)
        self.seq = 0
        self.writer = None
        self.recording_episode_id = None
        self.clients = {}
        self._pending = []  # heap of (due_tick, arrival, origin, msg, future, contributor)
        self._arrival = 0
        self._conn_counter = 0
        self._internal_seq = 0
        self._origin_contributor = {}
        self._live_event = asyncio.Event()
        self.task = None

    @property
    def dt(self) -> float:
        return self.world.dt

    def descriptor(self) -> dict:
        return {
            "session_id": self.id,
            "scene": self.scene_entry.name,
            "robot": self.robot_entry.name,
            "created_at": self.created_at,
            "state": self.state,
            "recording": self.recording_episode_id,
            "tick": self.world.state.tick,
            "dt": self.dt,
            "stream_rate_hz": STREAM_RATE_HZ,
        }

    # -- lifecycle -----------------------------------------------------------

    def ensure_live(self) -> None:
        if self.state == LOBBY:
            self.state = LIVE
            self._live_event.set()

    def attach(self, contributor=None) -> ClientConn:
        if self.state == CLOSED:
            raise SessionError(protocol.ERR_SESSION_CLOSED, "session is closed")
        self._conn_counter += 1
        conn = ClientConn(f"c{self._conn_counter}", contributor)
        self.clients[conn.id] = conn
        self._origin_contributor[conn.id] = contributor
        self.ensure_live()
        return conn

    def detach(self, conn: ClientConn) -> None:
        self.clients.pop(conn.id, None)
        conn.close()

    def close(self) -> dict | None:
        """Stop ticking; finalize any active recording. Returns the finalized
        manifest when a recording was open."""
        manifest = None
        if self.writer is not None:
            manifest = self._finalize_writer()
        self.state = CLOSED
        self._live_event.set()
        if self.task is not None:
            self.task.cancel()
        for conn in list(self.clients.values()):
            conn.close()
        self.clients.clear()
        return manifest

    # -- command intake --------------------------------------------------------

    def next_internal_seq(self) -> int:
        self._internal_seq += 1
        return self._internal_seq

    def enqueue_command(self, origin: str, msg, future=None, contributor=None) -> None:
        """Schedule a validated command. Without at_tick it applies at the next
        boundary; a stale at_tick also applies at the next boundary."""
        due = self.world.state.tick + 1
        at_tick = getattr(msg, "at_tick", None)
        if at_tick is not None and at_tick > due:
            due = at_tick
        heapq.heappush(self._pending,
                       (due, self._arrival, origin, msg, future, contributor))
        self._arrival += 1

    # -- the tick boundary -----------------------------------------------------

    def advance_tick(self):
        """Process one boundary: drain due commands in arrival order, step the
        world, record, and return (frame, outbound) where outbound is a list of
        (conn_id | None for broadcast, message)."""
        world = self.world
        t = world.state.tick + 1
        due = []
        while self._pending and self._pending[0][0] <= t:
            due.append(heapq.heappop(self._pending))

        pre_record = None
        if any(isinstance(item[3], protocol.RecordStart) for item in due):
            # the snapshot replay restores must predate this boundary's events
            pre_record = world.state_record()
            pre_record["next_seq"] = self.seq + 1

        events = []
        outbound = []
        for _, _, origin, msg, future, contributor in due:
            if isinstance(msg, protocol.TELEOP_TYPES) or isinstance(msg, protocol.ResetCmd):
                ev = command_to_action(msg, t, origin)
                apply_action(world, ev)
                events.append(ev)
            elif isinstance(msg, protocol.RecordStart):
                if self.writer is not None:
                    self._reject(future, origin, outbound, "already_recording",
                                 "a recording is already active")
                    continue
                try:
                    self.writer = self.store.open_episode(
                        session_id=self.id, label=msg.label, start_tick=t,
                        start_state=pre_record,
                        scene_name=self.scene_entry.name,
                        scene_digest=self.scene_entry.digest,
                        scene_text=self.scene_entry.text,
                        robot_name=self.robot_entry.name,
                        robot_digest=self.robot_entry.digest,
                        robot_text=self.robot_entry.text,
                        contributors=[contributor] if contributor else [])
                except StoreError as e:
                    self._reject(future, origin, outbound, "storage_failure", str(e))
                    continue
                self.recording_episode_id = self.writer.episode_id
                outbound.append((None, protocol.RecordingEvent(
                    episode_id=self.writer.episode_id, event="started", tick=t)))
                if future is not None and not future.done():
                    future.set_result({"episode_id": self.writer.episode_id, "tick": t})
            elif isinstance(msg, protocol.RecordStop):
                if self.writer is None:
                    self._reject(future, origin, outbound, "not_recording",
                                 "no active recording")
                    continue
                episode_id = self.writer.episode_id
                manifest = self._finalize_writer()
                outbound.append((None, protocol.RecordingEvent(
                    episode_id=episode_id, event="stopped",
                    tick=manifest["end_tick"])))
                if future is not None and not future.done():
                    future.set_result(manifest)
            else:
                self._reject(future, origin, outbound, "protocol_violation",
                             f"unexpected command {type(msg).__name__}")

        world.step(self.dt)
        self.seq += 1
        frame = world.snapshot(self.seq)
        if self.writer is not None:
            for ev in events:
                self.writer.append_action(ev)
            self.writer.append_frame(frame)
        return frame, outbound

    def _finalize_writer(self) -> dict:
        contributors = set()
        for origin in self.writer.origins:
            c = self._origin_contributor.get(origin)
            if c:
                contributors.add(c)
        manifest = self.writer.finalize(extra_contributors=contributors)
        self.writer = None
        self.recording_episode_id = None
        return manifest

    def _reject(self, future, origin, outbound, code, detail):
        if future is not None:
            if not future.done():
                future.set_exception(SessionError(code, detail))
        else:
            # ws-originated: the closed wire code set has no recording codes
            outbound.append((origin, protocol.ErrorMsg(
                code=protocol.ERR_PROTOCOL_VIOLATION, detail=f"{code}: {detail}")))

    # -- delivery ---------------------------------------------------------------

    def tick_and_deliver(self) -> None:
        frame, outbound = self.advance_tick()
        for target, msg in outbound:
            text = protocol.encode_message(msg)
            if target is None:
                for conn in self.clients.values():
                    conn.push(text)
            elif target in self.clients:
                self.clients[target].push(text)
        if frame.tick % STREAM_DECIMATION == 0:
            text = protocol.encode_message(frame.to_message())
            for conn in self.clients.values():
                conn.push(text, is_frame=True)

    async def run(self) -> None:
        """Fixed-timestep loop on the monotonic clock. A late tick executes
        immediately; after MAX_CATCHUP_TICKS consecutive catch-ups the timebase
        is re-based and the rebase is logged."""
        await self._live_event.wait()
        if self.state != LIVE:
            return
        loop = asyncio.get_running_loop()
        next_deadline = loop.time() + self.dt
        try:
            while self.state == LIVE:
                now = loop.time()
                if now < next_deadline:
                    await asyncio.sleep(next_deadline - now)
                executed = 0
                while self.state == LIVE:
                    self.tick_and_deliver()
                    next_deadline += self.dt
                    executed += 1
                    if loop.time() < next_deadline:
                        break
                    if executed >= MAX_CATCHUP_TICKS:
                        logger.warning(
                            "session %s: clock rebase after %d catch-up ticks at tick %d",
                            self.id, executed, self.world.state.tick)
                        next_deadline = loop.time() + self.dt
                        break
        except asyncio.CancelledError:
            pass

    # -- recording control used by the HTTP layer --------------------------------

    async def request_record_start(self, label: str, contributor=None) -> dict:
        self.ensure_live()
        future = asyncio.get_running_loop().create_future()
        self.enqueue_command("http", protocol.RecordStart(
            client_seq=self.next_internal_seq(), label=label),
            future=future, contributor=contributor)
        return await asyncio.wait_for(future, timeout=5.0)

    async def request_record_stop(self) -> dict:
        future = asyncio.get_running_loop().create_future()
        self.enqueue_command("http", protocol.RecordStop(
            client_seq=self.next_internal_seq()), future=future)
        return await asyncio.wait_for(future, timeout=5.0)
