"""Line-oriented declarative config format for robots, scenes, scripts, and service config.

Grammar (see docs/FORMAT.md for the full description):

    document := line*
    line     := '#' comment | blank | entry | 'key args... {' | '}'
    entry    := key value*

Keys are bare words. Values are typed scalars: integers, floats,
``true``/``false``, double-quoted strings (with ``\\"``, ``\\\\``, ``\\n``,
``\\t`` escapes), or bare words. A line whose last token is ``{`` opens a
nested section named by its first token; a lone ``}`` closes it. ``#``
starts a comment anywhere outside quotes.
"""

import re
from dataclasses import dataclass, field


class ConfigError(Exception):
    """Malformed document or schema/semantic violation, located by path:line."""

    def __init__(self, message: str, path: str = "<config>", line: int = 0):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}" if line else f"{path}: {message}")


_INT_RE = re.compile(r"^[+-]?\d+$")
_FLOAT_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")
_ESCAPES = {"\\": "\\", '"': '"', "n": "\n", "t": "\t"}


@dataclass
class Entry:
    key: str
    values: list
    line: int


@dataclass
class Section:
    name: str
    args: list
    line: int
    path: str = "<config>"
    items: list = field(default_factory=list)  # Entry | Section, in file order

    # -- accessors used by the schema readers ------------------------------

    def entries(self, key: str) -> list:
        return [i for i in self.items if isinstance(i, Entry) and i.key == key]

    def entry(self, key: str):
        found = self.entries(key)
        if len(found) > 1:
            raise ConfigError(f"duplicate entry {key!r}", self.path, found[1].line)
        return found[0] if found else None

    def require(self, key: str) -> Entry:
        e = self.entry(key)
        if e is None:
            raise ConfigError(f"missing required entry {key!r}", self.path, self.line)
        return e

    def sections(self, name: str) -> list:
        return [i for i in self.items if isinstance(i, Section) and i.name == name]

    def section(self, name: str):
        found = self.sections(name)
        if len(found) > 1:
            raise ConfigError(f"duplicate section {name!r}", self.path, found[1].line)
        return found[0] if found else None

    def error(self, message: str, line: int | None = None) -> ConfigError:
        return ConfigError(message, self.path, self.line if line is None else line)


def _tokenize(line: str, lineno: int, path: str) -> list:
    tokens = []
    i, n = 0, len(line)
    while i < n:
        c = line[i]
        if c in " \t":
            i += 1
            continue
        if c == "#":
            break
        if c == '"':
            i += 1
            buf = []
            while i < n and line[i] != '"':
                if line[i] == "\\":
                    i += 1
                    if i >= n or line[i] not in _ESCAPES:
                        raise ConfigError("bad string escape", path, lineno)
                    buf.append(_ESCAPES[line[i]])
                else:
                    buf.append(line[i])
                i += 1
            if i >= n:
                raise ConfigError("unterminated string", path, lineno)
            i += 1
            tokens.append("".join(buf))
            continue
        j = i
        while j < n and line[j] not in ' \t#"':
            j += 1
        word = line[i:j]
        i = j
        if word == "true":
            tokens.append(True)
        elif word == "false":
            tokens.append(False)
        elif _INT_RE.match(word):
            tokens.append(int(word))
        elif _FLOAT_RE.match(word):
            tokens.append(float(word))
        else:
            tokens.append(word)
    return tokens


def parse(text: str, path: str = "<config>") -> Section:
    """Parse a document into its root section."""
    root = Section(name="", args=[], line=0, path=path)
    stack = [root]
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = _tokenize(raw, lineno, path)
        if not tokens:
            continue
        if tokens == ["}"]:
            if len(stack) == 1:
                raise ConfigError("unmatched '}'", path, lineno)
            stack.pop()
            continue
        if "}" in tokens:
            raise ConfigError("'}' must be alone on its line", path, lineno)
        if tokens[-1] == "{":
            head = tokens[:-1]
            if not head or not isinstance(head[0], str) or "{" in head:
                raise ConfigError("bad section header", path, lineno)
            sec = Section(name=head[0], args=head[1:], line=lineno, path=path)
            stack[-1].items.append(sec)
            stack.append(sec)
            continue
        if "{" in tokens:
            raise ConfigError("'{' must end a section header line", path, lineno)
        if not isinstance(tokens[0], str):
            raise ConfigError("entry key must be a bare word", path, lineno)
        stack[-1].items.append(Entry(key=tokens[0], values=tokens[1:], line=lineno))
    if len(stack) > 1:
        raise ConfigError("unclosed section", path, stack[-1].line)
    return root


def parse_file(path) -> Section:
    with open(path, "r", encoding="utf-8") as f:
        return parse(f.read(), path=str(path))


# -- typed coercion helpers ------------------------------------------------

def entry_floats(entry: Entry, count: int | None, path: str) -> list:
    vals = []
    for v in entry.values:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{entry.key!r} expects numbers", path, entry.line)
        vals.append(float(v))
    if count is not None and len(vals) != count:
        raise ConfigError(f"{entry.key!r} expects {count} numbers, got {len(vals)}",
                          path, entry.line)
    return vals


def entry_float(entry: Entry, path: str) -> float:
    return entry_floats(entry, 1, path)[0]


def entry_int(entry: Entry, path: str) -> int:
    if len(entry.values) != 1 or isinstance(entry.values[0], bool) \
            or not isinstance(entry.values[0], int):
        raise ConfigError(f"{entry.key!r} expects one integer", path, entry.line)
    return entry.values[0]


def entry_bool(entry: Entry, path: str) -> bool:
    if len(entry.values) != 1 or not isinstance(entry.values[0], bool):
        raise ConfigError(f"{entry.key!r} expects true or false", path, entry.line)
    return entry.values[0]


def entry_str(entry: Entry, path: str) -> str:
    if len(entry.values) != 1 or not isinstance(entry.values[0], str):
        raise ConfigError(f"{entry.key!r} expects one string", path, entry.line)
    return entry.values[0]


def entry_word(entry: Entry, path: str, choices=None) -> str:
    word = entry_str(entry, path)
    if choices is not None and word not in choices:
        raise ConfigError(f"{entry.key!r} must be one of {sorted(choices)}, got {word!r}",
                          path, entry.line)
    return word
