"""Container lifecycle over a modeled host.

A container's root filesystem is the materialized image plus a private
writable overlay. Paths under a volume binding bypass the overlay and hit the
host tree directly, with the container's effective uid; uid 0 therefore
passes every host permission check, which is the escalation the ``notroot``
entrypoint exists to avoid.
"""
from __future__ import annotations

import hashlib
import shlex
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from . import logdrivers
from .buildengine import Interpreter, PackageDb, RunResult, TreeFs, read_users_from
from .errors import (
    DuplicateName,
    EntrypointMissing,
    EntrypointMissingEnv,
    ImageNotFound,
    InvalidState,
    MiniboxError,
    MissingHostPath,
    NotFound,
    NotRunning,
)
from .hostmodel import FileNode, FsTree, norm_path
from .imagestore import Image, Store, normalize_ref
from .logdrivers import LogDriverKind, MemoryAccount

NOTROOT_PATH = "/notroot.sh"


@dataclass(frozen=True)
class VolumeBinding:
    host_path: str
    container_path: str

    def __post_init__(self):
        if not self.container_path.startswith("/") or not self.host_path.startswith("/"):
            raise ValueError(f"volume paths must be absolute: {self}")
        object.__setattr__(self, "host_path", norm_path(self.host_path))
        object.__setattr__(self, "container_path", norm_path(self.container_path))

    @classmethod
    def parse(cls, text: str) -> "VolumeBinding":
        host, sep, cont = text.partition(":")
        if not sep:
            raise ValueError(f"volume must be HOST:CONTAINER, got {text!r}")
        return cls(host.strip(), cont.strip())

    def __str__(self):
        return f"{self.host_path}:{self.container_path}"


@dataclass(frozen=True)
class ContainerSpec:
    image: str
    name: str
    env: Tuple[Tuple[str, str], ...] = ()
    volumes: Tuple[VolumeBinding, ...] = ()
    memory_limit: Optional[int] = None
    log_driver: LogDriverKind = LogDriverKind()
    detach: bool = False
    command: Optional[Tuple[str, ...]] = None
    workdir: Optional[str] = None
    base_usage: int = 0
    labels: Tuple[Tuple[str, str], ...] = ()

    @classmethod
    def make(cls, image, name, env=None, volumes=(), command=None, labels=None, **kw):
        """Convenience constructor accepting dicts, strings and lists."""
        vols = tuple(v if isinstance(v, VolumeBinding) else VolumeBinding.parse(v) for v in volumes)
        if isinstance(kw.get("log_driver"), str):
            kw["log_driver"] = LogDriverKind.parse(kw["log_driver"])
        return cls(image, name, tuple((env or {}).items()), vols,
                   command=tuple(command) if command is not None else None,
                   labels=tuple(sorted((labels or {}).items())), **kw)

    @property
    def env_map(self) -> Dict[str, str]:
        return dict(self.env)

    @property
    def label_map(self) -> Dict[str, str]:
        return dict(self.labels)


@dataclass
class Container:
    id: str
    spec: ContainerSpec
    image: Image
    lower: FsTree
    rootfs: FsTree
    env: Dict[str, str]
    log_driver: LogDriverKind
    state: str = "created"
    exit_code: Optional[int] = None
    effective_uid: int = 0
    effective_gid: int = 0
    cwd: str = "/"
    account: MemoryAccount = field(default_factory=MemoryAccount)
    log: bytearray = field(default_factory=bytearray)

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def status(self) -> str:
        if self.state == "exited":
            return f"exited({self.exit_code})"
        return self.state

    @property
    def volumes(self) -> Tuple[VolumeBinding, ...]:
        return self.spec.volumes


@dataclass(frozen=True)
class ContainerSummary:
    id: str
    name: str
    image: str
    status: str

    def row(self) -> Tuple[str, str, str, str]:
        return (self.id, self.name, self.image, self.status)


class VirtualClock:
    """Integer milliseconds that move only when something charges time."""

    def __init__(self, now: int = 0):
        self.now = now

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("time cannot run backwards")
        self.now += ms
        return self.now


class ContainerFs:
    """Filesystem view of a container, routing volume paths to the host."""

    def __init__(self, runtime: "Runtime", container: Container, uid: int, gid: int):
        self.runtime = runtime
        self.container = container
        self.uid = uid
        self.gid = gid

    def route(self, path: str) -> Tuple[str, str]:
        for b in sorted(self.container.volumes, key=lambda b: -len(b.container_path)):
            cp = b.container_path
            if path == cp or path.startswith(cp.rstrip("/") + "/"):
                return "host", norm_path(b.host_path + "/" + path[len(cp):])
        return "overlay", path

    def _call(self, op: str, path: str, *args, **kw):
        where, real = self.route(path)
        tree = self.runtime.host if where == "host" else self.container.rootfs
        fs = TreeFs(tree, self.uid, self.gid)
        result = getattr(fs, op)(real, *args, **kw)
        if fs.tree is not tree:
            if where == "host":
                self.runtime.host = fs.tree
            else:
                self.container.rootfs = fs.tree
        return result

    def get(self, path):
        return self._call("get", path)

    def read(self, path):
        return self._call("read", path)

    def write(self, path, data, mode=0o644, uid=None, gid=None):
        return self._call("write", path, data, mode=mode, uid=uid, gid=gid)

    def mkdir(self, path, parents=False, mode=0o755):
        return self._call("mkdir", path, parents=parents, mode=mode)

    def remove(self, path, recursive=False):
        return self._call("remove", path, recursive=recursive)

    def chmod(self, path, mode):
        return self._call("chmod", path, mode)

    def chown(self, path, uid, gid):
        return self._call("chown", path, uid, gid)

    def listdir(self, path):
        return self._call("listdir", path)


class Runtime:
    """Owns the host tree, the containers and the engine event stream."""

    def __init__(self, store: Store, host: FsTree, pkgdb: Optional[PackageDb] = None,
                 clock: Optional[VirtualClock] = None):
        self.store = store
        self.host = host
        self.interpreter = Interpreter(pkgdb)
        self.clock = clock or VirtualClock()
        self.containers: Dict[str, Container] = {}
        self.counter = 0
        self.events: List[str] = []
        self.oom_events: List[logdrivers.OomEvent] = []
        self.listeners: List = []

    # -- plumbing ---------------------------------------------------------

    def emit(self, kind: str, container: Optional[Container] = None, **fields):
        parts = [f"t={self.clock.now}", kind]
        if container is not None:
            parts.append(container.name)
        parts += [f"{k}={v}" for k, v in fields.items()]
        self.events.append(" ".join(parts))

    def get(self, ref: Union[str, Container]) -> Container:
        if isinstance(ref, Container):
            return ref
        c = self.containers.get(ref)
        if c is None:
            matches = [c for c in self.containers.values() if c.id.startswith(ref)] if len(ref) >= 4 else []
            if len(matches) != 1:
                raise NotFound(f"no such container: {ref}")
            c = matches[0]
        return c

    def container_fs(self, container: Container, uid: Optional[int] = None,
                     gid: Optional[int] = None) -> ContainerFs:
        uid = container.effective_uid if uid is None else uid
        gid = (container.effective_gid if uid == container.effective_uid else uid) if gid is None else gid
        return ContainerFs(self, container, uid, gid)

    # -- lifecycle --------------------------------------------------------

    def create(self, spec: ContainerSpec) -> Container:
        if spec.name in self.containers:
            raise DuplicateName(f"container name {spec.name!r} already in use")
        try:
            image = self.store.resolve(spec.image)
        except NotFound:
            raise ImageNotFound(f"no such image: {normalize_ref(spec.image)}") from None
        for b in spec.volumes:
            if b.host_path not in self.host:
                raise MissingHostPath(f"host path {b.host_path} does not exist")
        driver = spec.log_driver.resolve(spec.volumes)
        lower = self.store.materialize(image)
        env = image.config.env_map
        env.update(spec.env_map)
        self.counter += 1
        cid = hashlib.sha256(f"{spec.name}\0{image.digest}\0{self.counter}".encode()).hexdigest()
        c = Container(cid, spec, image, lower, lower, env, driver,
                      account=MemoryAccount(spec.memory_limit, spec.base_usage))
        self.containers[spec.name] = c
        self.emit("create", c, id=cid[:12], image=normalize_ref(spec.image))
        return c

    def start(self, ref) -> Container:
        c = self.get(ref)
        if c.state != "created":
            raise InvalidState(f"cannot start {c.name}: state is {c.status}")
        entry = c.image.config.entrypoint
        notroot = False
        if entry:
            node = c.rootfs.get(entry[0])
            if node is None:
                raise EntrypointMissing(f"entrypoint {entry[0]} not found in image")
            notroot = is_notroot(node)
        if notroot:
            self._notroot_setup(c)
        c.cwd = self._workdir(c)
        c.state = "running"
        self.emit("start", c, uid=c.effective_uid)
        logdrivers.check_oom(self, c)
        if c.state == "running" and c.spec.command:
            result = self._run_command(c, c.spec.command)
            if c.state == "running" and not c.spec.detach:
                c.state = "exited"
                c.exit_code = result
                self.emit("exit", c, code=result)
        elif c.state == "running" and not c.spec.detach:
            c.state = "exited"
            c.exit_code = 0
            self.emit("exit", c, code=0)
        return c

    def run(self, spec: ContainerSpec) -> Container:
        return self.start(self.create(spec))

    def _workdir(self, c: Container) -> str:
        if c.spec.workdir:
            return norm_path(c.spec.workdir)
        if c.volumes:
            return c.volumes[0].container_path
        return c.cwd

    def _notroot_setup(self, c: Container):
        """Built-in equivalent of ``/notroot.sh``: make the account, switch uid."""
        env = c.env
        if "useruid" not in env:
            raise EntrypointMissingEnv("notroot entrypoint needs --env useruid=UID")
        try:
            uid = int(env["useruid"])
            gid = int(env.get("usergid", uid))
        except ValueError:
            raise EntrypointMissingEnv(f"useruid must be numeric, got {env['useruid']!r}") from None
        username = env.get("username") or f"user{uid}"
        groupname = env.get("groupname") or username
        home = norm_path(env.get("userhome") or f"/home/{username}")
        fs = self.container_fs(c, uid=0, gid=0)
        users = read_users_from(fs)
        script = []
        if not users.has_group(gid):
            if groupname in users.group_map.values():
                groupname = f"group{gid}"
            script.append(f"groupadd -g {gid} {shlex.quote(groupname)}")
        if not users.has_user(uid):
            if username in users.user_map.values():
                username = f"user{uid}"
            script.append(f"useradd -u {uid} -g {gid} -d {shlex.quote(home)} {shlex.quote(username)}")
        script.append(f"mkdir -p {shlex.quote(home)}")
        script.append(f"chown {uid}:{gid} {shlex.quote(home)}")
        self.interpreter.run(" && ".join(script), fs, env)
        c.effective_uid, c.effective_gid, c.cwd = uid, gid, home

    def _command_text(self, command: Sequence[str]) -> str:
        if len(command) >= 3 and command[0] in ("sh", "bash", "/bin/sh", "/bin/bash") and command[1] == "-c":
            return command[2]
        return " ".join(a if a in ("&&", ">>", ">") else shlex.quote(a) for a in command)

    def _run_command(self, c: Container, command: Sequence[str]) -> int:
        fs = self.container_fs(c)
        try:
            result = self.interpreter.run(self._command_text(command), fs, c.env, c.cwd)
        except MiniboxError as exc:
            self.stdout_write(c, f"{command[0]}: {exc.name}: {exc}\n".encode())
            return 1
        if result.stdout:
            self.stdout_write(c, result.stdout)
        return result.exit_code

    def exec(self, ref, command: Sequence[str], uid_override: Optional[int] = None) -> RunResult:
        """Run ``command`` inside a running container; domain errors propagate."""
        c = self.get(ref)
        if c.state != "running":
            raise NotRunning(f"{c.name} is not running ({c.status})")
        fs = self.container_fs(c, uid=uid_override)
        result = self.interpreter.run(self._command_text(command), fs, c.env, c.cwd)
        self.emit("exec", c, code=result.exit_code)
        return result

    def stop(self, ref) -> Container:
        c = self.get(ref)
        if c.state != "running":
            raise InvalidState(f"cannot stop {c.name}: state is {c.status}")
        c.state = "exited"
        c.exit_code = 137
        self.emit("stop", c, code=137)
        return c

    def exit(self, ref, code: int = 0) -> Container:
        """The container's main process returned ``code``."""
        c = self.get(ref)
        if c.state != "running":
            raise InvalidState(f"cannot exit {c.name}: state is {c.status}")
        c.state = "exited"
        c.exit_code = code
        self.emit("exit", c, code=code)
        return c

    def remove(self, ref, force: bool = False) -> None:
        c = self.get(ref)
        if c.state == "running":
            if not force:
                raise InvalidState(f"cannot remove running container {c.name} (stop it or use force)")
            self.stop(c)
        del self.containers[c.name]
        c.log = bytearray()
        self.emit("remove", c)
        for listener in self.listeners:
            listener(c)

    def list(self) -> List[ContainerSummary]:
        return [ContainerSummary(c.id[:12], c.name, normalize_ref(c.spec.image), c.status)
                for c in self.containers.values()]

    # -- logging ----------------------------------------------------------

    def stdout_write(self, ref, data: bytes) -> None:
        logdrivers.stdout_write(self, self.get(ref), data)

    def read_logs(self, ref) -> bytes:
        return logdrivers.read_logs(self, self.get(ref))

    def set_limit(self, ref, limit: Optional[int]) -> None:
        logdrivers.set_limit(self, self.get(ref), limit)


def notroot_digest() -> str:
    from .fixtures import notroot_script
    return hashlib.sha256(notroot_script()).hexdigest()


def is_notroot(node: FileNode) -> bool:
    """The registered notroot program: right path and the known script content."""
    return node.path == NOTROOT_PATH and hashlib.sha256(node.data).hexdigest() == notroot_digest()
