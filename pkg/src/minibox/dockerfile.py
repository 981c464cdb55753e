"""Parser and renderer for the Dockerfile subset minibox understands.

Supported keywords: FROM, MAINTAINER, ENV, RUN, COPY, ENTRYPOINT, VOLUME.
Comments are whole lines starting with ``#``; a trailing backslash joins the
next line with a single space.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

from .errors import (
    DanglingContinuation,
    DockerfileError,
    MalformedArgs,
    MissingFrom,
    UnknownKeyword,
)

KEYWORDS = ("FROM", "MAINTAINER", "ENV", "RUN", "COPY", "ENTRYPOINT", "VOLUME")

_ENV_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


@dataclass(frozen=True)
class Instruction:
    """One logical Dockerfile line.

    ``args`` depends on ``kind``:

    * FROM: ``(name, tag)`` with ``tag`` possibly ``None``
    * ENV: ``(key, value)``
    * RUN / MAINTAINER / VOLUME: ``(text,)``
    * COPY: ``(source, destination)``
    * ENTRYPOINT: the exec-form strings
    """

    kind: str
    args: Tuple[Optional[str], ...]
    span: Tuple[int, int] = field(default=(0, 0), compare=False)

    @property
    def text(self) -> str:
        return render_instruction(self)


@dataclass(frozen=True)
class BuildSpec:
    instructions: Tuple[Instruction, ...]
    source: str = field(default="", compare=False, repr=False)

    def __iter__(self):
        return iter(self.instructions)

    def __len__(self):
        return len(self.instructions)

    @property
    def kinds(self) -> List[str]:
        return [i.kind for i in self.instructions]


@dataclass(frozen=True)
class Diagnostic:
    line: int
    col: int
    severity: str
    message: str

    def __str__(self):
        return f"{self.line}:{self.col}: {self.severity}: {self.message}"


def _logical_lines(text: str):
    """Yield ``(first_line, last_line, joined_text)`` for each instruction."""
    pieces: List[str] = []
    first = 0
    lineno = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            # comment and blank lines inside a continuation are skipped
            continue
        if not pieces:
            first = lineno
        if stripped.endswith("\\"):
            body = stripped[:-1].strip()
            if body:
                pieces.append(body)
            continue
        pieces.append(stripped)
        yield first, lineno, " ".join(pieces)
        pieces = []
    if pieces or _ends_with_continuation(text):
        raise DanglingContinuation("file ends inside a line continuation", lineno)


def _ends_with_continuation(text: str) -> bool:
    for raw in reversed(text.splitlines()):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        return stripped.endswith("\\")
    return False


def _parse_exec_form(kind: str, arg: str, line: int) -> Tuple[str, ...]:
    if not (arg.startswith("[") and arg.endswith("]")):
        raise MalformedArgs(f"{kind} requires exec form [\"...\"]", line)
    try:
        value = json.loads(arg)
    except ValueError:
        raise MalformedArgs(f"{kind} exec form is not a list of strings", line) from None
    if not value or not all(isinstance(v, str) for v in value):
        raise MalformedArgs(f"{kind} exec form is not a list of strings", line)
    return tuple(value)


def _parse_args(kind: str, arg: str, line: int) -> Tuple[Optional[str], ...]:
    if not arg:
        raise MalformedArgs(f"{kind} needs an argument", line)
    if kind == "FROM":
        parts = arg.split()
        if len(parts) != 1:
            raise MalformedArgs("FROM takes exactly one image reference", line)
        name, tag = split_ref(parts[0])
        if not name:
            raise MalformedArgs("FROM image name is empty", line)
        return (name, tag)
    if kind == "ENV":
        first = arg.split(None, 1)[0]
        if "=" in first:
            key, _, value = arg.partition("=")
            value = value.strip()
            if len(value) >= 2 and value[0] == value[-1] == '"':
                value = value[1:-1].strip()
            if not value:
                raise MalformedArgs("ENV value is empty", line)
        else:
            parts = arg.split(None, 1)
            if len(parts) != 2:
                raise MalformedArgs("ENV needs a key and a value", line)
            key, value = parts
        if not _ENV_KEY.match(key):
            raise MalformedArgs(f"bad ENV key {key!r}", line)
        return (key, value)
    if kind == "COPY":
        parts = arg.split()
        if len(parts) != 2:
            raise MalformedArgs("COPY takes exactly a source and a destination", line)
        return (parts[0], parts[1])
    if kind == "ENTRYPOINT":
        return _parse_exec_form(kind, arg, line)
    if kind == "VOLUME":
        if arg.startswith("["):
            paths = _parse_exec_form(kind, arg, line)
            if len(paths) != 1:
                raise MalformedArgs("VOLUME takes exactly one path", line)
            return paths
        parts = arg.split()
        if len(parts) != 1:
            raise MalformedArgs("VOLUME takes exactly one path", line)
        return (parts[0],)
    # RUN, MAINTAINER
    return (arg,)


def split_ref(ref: str) -> Tuple[str, Optional[str]]:
    """Split ``name[:tag]``; a colon before the last slash belongs to a host."""
    slash = ref.rfind("/")
    colon = ref.rfind(":")
    if colon > slash:
        return ref[:colon], ref[colon + 1:] or None
    return ref, None


def parse(text: Union[str, bytes]) -> BuildSpec:
    """Parse Dockerfile source into a :class:`BuildSpec`.

    Raises a :class:`~minibox.errors.DockerfileError` subclass on bad input;
    it never raises anything else.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    instructions = []
    for first, last, logical in _logical_lines(text):
        keyword, *rest = logical.split(None, 1)
        rest = rest[0] if rest else ""
        kind = keyword.upper()
        if kind not in KEYWORDS:
            raise UnknownKeyword(f"unknown instruction {keyword!r}", first)
        args = _parse_args(kind, rest.strip(), first)
        instructions.append(Instruction(kind, args, (first, last)))
    if not instructions:
        raise MissingFrom("no FROM instruction", 1)
    if instructions[0].kind != "FROM":
        raise MissingFrom("first instruction must be FROM", instructions[0].span[0])
    return BuildSpec(tuple(instructions), text)


def parse_file(path) -> BuildSpec:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())


def render_instruction(ins: Instruction) -> str:
    a = ins.args
    if ins.kind == "FROM":
        return f"FROM {a[0]}:{a[1]}" if a[1] else f"FROM {a[0]}"
    if ins.kind == "ENV":
        return f"ENV {a[0]} {a[1]}"
    if ins.kind == "COPY":
        return f"COPY {a[0]} {a[1]}"
    if ins.kind == "ENTRYPOINT":
        return "ENTRYPOINT " + json.dumps(list(a))
    return f"{ins.kind} {a[0]}"


def render(spec: BuildSpec) -> str:
    return "\n".join(render_instruction(i) for i in spec.instructions)


def validate(spec: BuildSpec) -> List[Diagnostic]:
    diags = []
    seen_env = {}
    entrypoints = []
    for ins in spec.instructions:
        line = ins.span[0]
        if ins.kind == "ENV":
            key = ins.args[0]
            if key in seen_env:
                diags.append(Diagnostic(line, 1, "warning",
                                        f"ENV {key} redefined (first set on line {seen_env[key]})"))
            else:
                seen_env[key] = line
        elif ins.kind == "ENTRYPOINT":
            entrypoints.append(ins)
        elif ins.kind == "VOLUME" and not ins.args[0].startswith("/"):
            diags.append(Diagnostic(line, 8, "error",
                                    f"VOLUME path {ins.args[0]!r} is not absolute"))
    for ins in entrypoints[:-1]:
        diags.append(Diagnostic(ins.span[0], 1, "warning",
                                "ENTRYPOINT overridden by a later ENTRYPOINT (last wins)"))
    diags.sort(key=lambda d: (d.line, d.col))
    return diags


def format_error(err: DockerfileError) -> str:
    return str(Diagnostic(err.line or 1, 1, "error", str(err).split(": ", 1)[-1]))
