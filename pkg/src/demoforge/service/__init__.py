from .app import create_app
from .config import ServiceConfig, resolve_config, split_bind
from .session import (STREAM_DECIMATION, STREAM_RATE_HZ, ClientConn, Session,
                      SessionError)

__all__ = [
    "create_app", "ServiceConfig", "resolve_config", "split_bind",
    "STREAM_DECIMATION", "STREAM_RATE_HZ", "ClientConn", "Session", "SessionError",
]
