"""Container stdout handling and memory accounting.

The ``memory`` driver keeps every byte a container prints in an engine-side
buffer that is charged to the container and never reclaimed, as Docker 1.6
did. ``volume-file`` appends to a file reached through a volume binding and
charges nothing; ``discard`` drops output.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import LogPathNotOnVolume, NotRunning
from .hostmodel import norm_path

MEMORY = "memory"
VOLUME_FILE = "volume-file"
DISCARD = "discard"
KINDS = (MEMORY, VOLUME_FILE, DISCARD)


@dataclass(frozen=True)
class LogDriverKind:
    kind: str = MEMORY
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown log driver {self.kind!r} (choose {', '.join(KINDS)})")
        if self.path is not None and self.kind != VOLUME_FILE:
            raise ValueError(f"log driver {self.kind} takes no path")

    @classmethod
    def parse(cls, text: str) -> "LogDriverKind":
        """``memory``, ``discard``, ``volume-file`` or ``volume-file:/container/path``."""
        kind, _, path = text.partition(":")
        return cls(kind, norm_path(path) if path else None)

    def __str__(self):
        return f"{self.kind}:{self.path}" if self.path else self.kind

    def resolve(self, volumes) -> "LogDriverKind":
        """Fix the log path for ``volume-file``; it must sit under a binding."""
        if self.kind != VOLUME_FILE:
            return self
        if not volumes:
            raise LogPathNotOnVolume("volume-file logging needs a --volume binding")
        path = self.path or norm_path(volumes[0].container_path + "/container.log")
        for b in volumes:
            if path.startswith(b.container_path.rstrip("/") + "/"):
                return LogDriverKind(VOLUME_FILE, path)
        raise LogPathNotOnVolume(f"log path {path} is not under any volume binding")


@dataclass
class MemoryAccount:
    limit: Optional[int] = None
    base_usage: int = 0
    log_buffer: int = 0

    @property
    def usage(self) -> int:
        return self.base_usage + self.log_buffer

    @property
    def exceeded(self) -> bool:
        return self.limit is not None and self.usage > self.limit


@dataclass(frozen=True)
class OomEvent:
    container_id: str
    name: str
    usage: int
    limit: int
    at_ms: int

    def __str__(self):
        return f"OOM {self.name} usage={self.usage} limit={self.limit}"


def check_oom(runtime, container) -> Optional[OomEvent]:
    """Kill ``container`` if its account is over the limit. Kills are final."""
    account = container.account
    if container.state != "running" or not account.exceeded:
        return None
    event = OomEvent(container.id, container.name, account.usage, account.limit,
                     runtime.clock.now)
    container.state = "oom_killed"
    container.exit_code = 137
    runtime.oom_events.append(event)
    runtime.emit("oom", container, usage=event.usage, limit=event.limit)
    return event


def stdout_write(runtime, container, data: bytes) -> None:
    if container.state != "running":
        raise NotRunning(f"{container.name} is {container.status}")
    driver = container.log_driver
    if driver.kind == MEMORY:
        container.log += data
        container.account.log_buffer = len(container.log)
        check_oom(runtime, container)
    elif driver.kind == VOLUME_FILE:
        fs = runtime.container_fs(container)
        old = fs.get(driver.path)
        fs.write(driver.path, (old.data if old is not None else b"") + data)


def read_logs(runtime, container) -> bytes:
    driver = container.log_driver
    if driver.kind == MEMORY:
        return bytes(container.log)
    if driver.kind == VOLUME_FILE:
        node = runtime.container_fs(container, uid=0).get(driver.path)
        return node.data if node is not None else b""
    return b""


def set_limit(runtime, container, limit: Optional[int]) -> None:
    container.account.limit = limit
    check_oom(runtime, container)
