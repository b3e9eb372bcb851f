import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from demoforge.catalog import bundled_script_path, load_catalog
from demoforge.client import SessionClient, create_session, parse_script_file


@pytest.fixture(scope="session")
def catalog():
    return load_catalog()


@pytest.fixture(scope="session")
def planar2(catalog):
    return catalog.robots["planar2"].model


@pytest.fixture(scope="session")
def planar3(catalog):
    return catalog.robots["planar3"].model


@pytest.fixture(scope="session")
def arm7(catalog):
    return catalog.robots["arm7"].model


class LiveServer:
    """demoforge serve subprocess bound to an ephemeral port."""

    def __init__(self, data_dir, extra_args=(), env=None):
        self.data_dir = Path(data_dir)
        cmd = [sys.executable, "-m", "demoforge.cli", "--data-dir", str(data_dir),
               "serve", "--bind", "127.0.0.1:0", *extra_args]
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE,
                                     stderr=subprocess.PIPE, text=True, env=env)
        line = self.proc.stdout.readline()
        if "listening on" not in line:
            err = self.proc.stderr.read()
            raise RuntimeError(f"server did not start: {line!r} {err!r}")
        self.url = line.split("listening on ", 1)[1].split()[0]

    def stop(self, timeout=15.0) -> int:
        if self.proc.poll() is None:
            self.proc.send_signal(signal.SIGTERM)
            try:
                self.proc.wait(timeout=timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        return self.proc.returncode

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()


@pytest.fixture
def server_factory(tmp_path):
    servers = []

    def _start(data_dir=None, extra_args=()):
        server = LiveServer(data_dir or tmp_path / "data", extra_args=extra_args)
        servers.append(server)
        return server

    yield _start
    for server in servers:
        server.kill()


# name -> (scene, robot, script name or None, tail ticks)
FIXTURE_SPECS = {
    "pick_place": ("tabletop", "planar3", "pick_place", 150),
    "grip_cycle": ("tabletop", "planar3", "grip_cycle", 60),
    "reset_mid": ("tabletop", "planar3", "reset_mid", 60),
    "delta_walk": ("reach", "planar2", "delta_walk", 60),
    "bench7_sweep": ("bench7", "arm7", "bench7_sweep", 100),
    "zero_action": ("tabletop", "planar3", None, 60),
}


def record_fixture(url: str, name: str, contributor="fixture") -> str:
    scene, robot, script, tail = FIXTURE_SPECS[name]
    session = create_session(url, scene, robot)
    rows = parse_script_file(bundled_script_path(script)) if script else []
    client = SessionClient(url, session["session_id"], contributor=contributor)
    try:
        return client.run_script(rows, label=name, tail=tail)
    finally:
        client.close()


@dataclass
class FixtureSet:
    data_dir: Path
    episodes: dict  # fixture name -> episode id
    wall_seconds: float

    def episode_dir(self, name: str) -> Path:
        return self.data_dir / "episodes" / self.episodes[name]


@pytest.fixture(scope="session")
def recorded_fixtures(tmp_path_factory) -> FixtureSet:
    """All bundled fixtures recorded once against one live server, driven
    concurrently in separate sessions (which also exercises isolation)."""
    data_dir = tmp_path_factory.mktemp("fixture-store")
    server = LiveServer(data_dir)
    episodes = {}
    errors = {}
    t0 = time.monotonic()

    def _run(name):
        try:
            episodes[name] = record_fixture(server.url, name)
        except Exception as e:  # surfaced below
            errors[name] = e

    threads = [threading.Thread(target=_run, args=(name,)) for name in FIXTURE_SPECS]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=120)
    wall = time.monotonic() - t0
    code = server.stop()
    if errors:
        raise RuntimeError(f"fixture recording failed: {errors}")
    assert code == 0, "fixture server did not exit cleanly"
    return FixtureSet(data_dir=data_dir, episodes=episodes, wall_seconds=wall)
