"""Canonical text encoding shared by the wire protocol, record logs, and digests.

Canonical form: a JSON object with keys sorted ascending bytewise, no
whitespace, UTF-8, floats in their shortest round-trip representation.
Equal values encode to identical bytes, which is what replay digests and
broadcast-equality checks rely on.
"""

import hashlib
import json


def canonical_dumps(obj) -> str:
    """Encode ``obj`` canonically. Rejects NaN and infinities."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False)


def canonical_loads(text: str):
    """Strict JSON parse: NaN/Infinity literals are rejected."""

    def _no_const(name):
        raise ValueError(f"non-finite constant {name!r} not allowed")

    return json.loads(text, parse_constant=_no_const)


def canonical_digest(obj) -> str:
    """Hex SHA-256 of the canonical encoding of ``obj``."""
    return hashlib.sha256(canonical_dumps(obj).encode("utf-8")).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
