"""Service configuration: CLI flags override environment variables, which
override the config file, which overrides defaults."""

import os
from dataclasses import dataclass
from pathlib import Path

from ..configtext import (ConfigError, entry_int, entry_str, parse_file)

DEFAULT_BIND = "127.0.0.1:8080"
DEFAULT_MAX_SESSIONS = 32
DEFAULT_MEDIA_CAP_BYTES = 256 * 1024 * 1024

ENV_DATA_DIR = "DEMOFORGE_DATA_DIR"
ENV_BIND = "DEMOFORGE_BIND"
ENV_MAX_SESSIONS = "DEMOFORGE_MAX_SESSIONS"
ENV_MEDIA_CAP = "DEMOFORGE_MEDIA_CAP_BYTES"


@dataclass
class ServiceConfig:
    data_dir: Path
    host: str = "127.0.0.1"
    port: int = 8080
    max_sessions: int = DEFAULT_MAX_SESSIONS
    media_cap_bytes: int = DEFAULT_MEDIA_CAP_BYTES


def split_bind(bind: str) -> tuple:
    host, _, port = bind.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bind must be host:port, got {bind!r}")
    return host, int(port)


def resolve_config(*, config_path=None, data_dir=None, bind=None,
                   max_sessions=None, media_cap_bytes=None,
                   env=None) -> ServiceConfig:
    env = os.environ if env is None else env
    values = {
        "data_dir": "./demoforge-data",
        "bind": DEFAULT_BIND,
        "max_sessions": DEFAULT_MAX_SESSIONS,
        "media_cap_bytes": DEFAULT_MEDIA_CAP_BYTES,
    }
    if config_path is not None:
        doc = parse_file(config_path)
        if doc.entry("data_dir") is not None:
            values["data_dir"] = entry_str(doc.entry("data_dir"), doc.path)
        if doc.entry("bind") is not None:
            values["bind"] = entry_str(doc.entry("bind"), doc.path)
        if doc.entry("max_sessions") is not None:
            values["max_sessions"] = entry_int(doc.entry("max_sessions"), doc.path)
        if doc.entry("media_cap_bytes") is not None:
            values["media_cap_bytes"] = entry_int(doc.entry("media_cap_bytes"), doc.path)
    if env.get(ENV_DATA_DIR):
        values["data_dir"] = env[ENV_DATA_DIR]
    if env.get(ENV_BIND):
        values["bind"] = env[ENV_BIND]
    if env.get(ENV_MAX_SESSIONS):
        values["max_sessions"] = int(env[ENV_MAX_SESSIONS])
    if env.get(ENV_MEDIA_CAP):
        values["media_cap_bytes"] = int(env[ENV_MEDIA_CAP])
    if data_dir is not None:
        values["data_dir"] = data_dir
    if bind is not None:
        values["bind"] = bind
    if max_sessions is not None:
        values["max_sessions"] = max_sessions
    if media_cap_bytes is not None:
        values["media_cap_bytes"] = media_cap_bytes

    host, port = split_bind(values["bind"])
    if values["max_sessions"] < 1:
        raise ValueError("max_sessions must be >= 1")
    if values["media_cap_bytes"] < 1:
        raise ValueError("media_cap_bytes must be >= 1")
    return ServiceConfig(data_dir=Path(values["data_dir"]), host=host, port=port,
                         max_sessions=values["max_sessions"],
                         media_cap_bytes=values["media_cap_bytes"])
