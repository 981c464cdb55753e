"""Compose-style deployments from a YAML file.

Schema (``minibox: 1``)::

    external_hosts:            # scripted database hosts and ssh gateways
      - {name: datahost, port: 1433, responses: datahost.responses}
      - {name: gateway, gateway: true}
    services:
      NAME:
        image: REF
        role: plain | proxy | tunnel     # default plain
        links: [NAME, ...]
        env: {KEY: VALUE}
        volumes: [HOST:CONTAINER, ...]
        memory_limit: BYTES
        log_driver: memory | discard | volume-file[:PATH]
        port: 1433                       # proxy/tunnel listen port
        targethost / tunneluser / tunnelhost: ...
    profiles:
      PROFILE: {NAME: <full service definition replacing NAME>}
"""
from __future__ import annotations

import heapq
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import yaml

from .errors import (
    BadSubstitution,
    CyclicLinks,
    MissingAuthSocket,
    NotFound,
    ParseError,
    UnknownImage,
    UnknownService,
)
from .logdrivers import LogDriverKind
from .netfabric import AUTH_SOCK_PATH, DEFAULT_PORT, ScriptedHost
from .runtime import ContainerSpec, VolumeBinding

ROLES = ("plain", "proxy", "tunnel")
ROLE_KEYS = {"plain": (), "proxy": ("targethost",), "tunnel": ("tunneluser", "tunnelhost", "targethost")}
SERVICE_KEYS = {"image", "role", "links", "env", "volumes", "memory_limit", "log_driver",
                "port", "targethost", "tunneluser", "tunnelhost", "command"}
TOP_KEYS = {"minibox", "services", "profiles", "external_hosts"}
PROJECT_LABEL = "minibox.project"
SERVICE_LABEL = "minibox.service"


@dataclass(frozen=True)
class ServiceDef:
    name: str
    image: str
    role: str = "plain"
    env: Tuple[Tuple[str, str], ...] = ()
    volumes: Tuple[VolumeBinding, ...] = ()
    links: Tuple[str, ...] = ()
    memory_limit: Optional[int] = None
    log_driver: LogDriverKind = LogDriverKind()
    port: int = DEFAULT_PORT
    targethost: Optional[str] = None
    tunneluser: Optional[str] = None
    tunnelhost: Optional[str] = None
    command: Optional[Tuple[str, ...]] = None

    @property
    def env_map(self) -> Dict[str, str]:
        return dict(self.env)


@dataclass(frozen=True)
class ExternalHost:
    name: str
    port: int = DEFAULT_PORT
    gateway: bool = False
    responder: Tuple[Tuple[bytes, bytes], ...] = ()


@dataclass
class ComposeSpec:
    services: Dict[str, ServiceDef]
    profiles: Dict[str, Dict[str, ServiceDef]] = field(default_factory=dict)
    external_hosts: List[ExternalHost] = field(default_factory=list)
    diagnostics: List[str] = field(default_factory=list)
    project: str = "default"

    def effective(self, profile: Optional[str] = None) -> Dict[str, ServiceDef]:
        services = dict(self.services)
        if profile:
            if profile not in self.profiles:
                raise UnknownService(f"unknown profile {profile!r}")
            services.update(self.profiles[profile])
        return services


@dataclass(frozen=True)
class DeploymentPlan:
    start: Tuple[str, ...]

    @property
    def stop(self) -> Tuple[str, ...]:
        return tuple(reversed(self.start))


@dataclass
class Deployment:
    project: str
    service: str
    profile: Optional[str]
    plan: DeploymentPlan
    created: List[str] = field(default_factory=list)
    reused: List[str] = field(default_factory=list)


def _service(name: str, raw, diags: List[str], where: str) -> ServiceDef:
    if not isinstance(raw, Mapping):
        raise ParseError(f"{where}: service {name!r} must be a mapping")
    for key in sorted(set(raw) - SERVICE_KEYS):
        diags.append(f"{where}.{name}: unknown key {key!r} ignored")
    if "image" not in raw:
        raise ParseError(f"{where}.{name}: image is required")
    role = raw.get("role", "plain")
    if role not in ROLES:
        raise ParseError(f"{where}.{name}: role must be one of {', '.join(ROLES)}")
    missing = [k for k in ROLE_KEYS[role] if not raw.get(k)]
    if missing:
        raise ParseError(f"{where}.{name}: role {role} needs {', '.join(missing)}")
    try:
        volumes = tuple(VolumeBinding.parse(str(v)) for v in raw.get("volumes") or ())
        log_driver = LogDriverKind.parse(str(raw.get("log_driver", "memory")))
    except ValueError as exc:
        raise ParseError(f"{where}.{name}: {exc}") from None
    env = raw.get("env") or {}
    command = raw.get("command")
    if isinstance(command, str):
        command = ("sh", "-c", command)
    return ServiceDef(
        name=name,
        image=str(raw["image"]),
        role=role,
        env=tuple((str(k), str(v)) for k, v in env.items()),
        volumes=volumes,
        links=tuple(str(x) for x in raw.get("links") or ()),
        memory_limit=int(raw["memory_limit"]) if raw.get("memory_limit") is not None else None,
        log_driver=log_driver,
        port=int(raw.get("port", DEFAULT_PORT)),
        targethost=raw.get("targethost"),
        tunneluser=raw.get("tunneluser"),
        tunnelhost=raw.get("tunnelhost"),
        command=tuple(command) if command else None,
    )


def load(text: str, base_dir: Optional[str] = None, project: str = "default") -> ComposeSpec:
    """Parse and validate a compose document.

    Relative ``responses`` files of external hosts are read from ``base_dir``.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML: {exc}") from None
    if not isinstance(doc, Mapping):
        raise ParseError("compose file must be a mapping")
    if doc.get("minibox") != 1:
        raise ParseError("compose file must declare 'minibox: 1'")
    diags = [f"unknown top-level key {k!r} ignored" for k in sorted(set(doc) - TOP_KEYS)]
    raw_services = doc.get("services") or {}
    if not isinstance(raw_services, Mapping) or not raw_services:
        raise ParseError("services must be a non-empty mapping")
    services = {str(n): _service(str(n), s, diags, "services") for n, s in raw_services.items()}

    profiles = {}
    for pname, subs in (doc.get("profiles") or {}).items():
        table = {}
        for sname, raw in (subs or {}).items():
            if sname not in services:
                raise BadSubstitution(f"profile {pname}: {sname!r} is not a service")
            alt = _service(str(sname), raw, diags, f"profiles.{pname}")
            if alt.port != services[sname].port:
                raise BadSubstitution(
                    f"profile {pname}: {sname} listens on {alt.port}, not {services[sname].port}")
            table[str(sname)] = alt
        profiles[str(pname)] = table

    hosts = []
    for raw in doc.get("external_hosts") or ():
        table = ()
        if raw.get("responses"):
            src = raw["responses"]
            if isinstance(src, Mapping):
                parsed = {str(k).encode(): str(v).encode() for k, v in src.items()}
            else:
                fn = src if os.path.isabs(src) or base_dir is None else os.path.join(base_dir, src)
                try:
                    with open(fn, encoding="utf-8") as fh:
                        parsed = ScriptedHost.parse_table(fh.read())
                except OSError as exc:
                    raise ParseError(f"external host {raw.get('name')}: {exc}") from None
            table = tuple(sorted(parsed.items()))
        hosts.append(ExternalHost(str(raw["name"]), int(raw.get("port", DEFAULT_PORT)),
                                  bool(raw.get("gateway", False)), table))

    spec = ComposeSpec(services, profiles, hosts, diags, project)
    for profile in [None] + sorted(profiles):
        _check_graph(spec.effective(profile))
    return spec


def load_file(path: str) -> ComposeSpec:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    project = os.path.splitext(os.path.basename(path))[0]
    return load(text, os.path.dirname(os.path.abspath(path)), project)


def _check_graph(services: Mapping[str, ServiceDef]):
    for s in services.values():
        for link in s.links:
            if link not in services:
                raise UnknownService(f"{s.name} links to undefined service {link!r}")
    state: Dict[str, int] = {}

    def visit(name, trail):
        state[name] = 1
        for dep in services[name].links:
            if state.get(dep) == 1:
                cycle = trail[trail.index(dep):] + [dep]
                raise CyclicLinks("link cycle: " + " -> ".join(cycle))
            if dep not in state:
                visit(dep, trail + [dep])
        state[name] = 2

    for name in sorted(services):
        if name not in state:
            visit(name, [name])


def plan(spec: ComposeSpec, target: str, profile: Optional[str] = None) -> DeploymentPlan:
    """Dependencies of ``target`` in start order; ties broken by name."""
    services = spec.effective(profile)
    if target not in services:
        raise UnknownService(f"no such service: {target}")
    closure = set()
    stack = [target]
    while stack:
        name = stack.pop()
        if name not in closure:
            closure.add(name)
            stack.extend(services[name].links)
    indegree = {n: len(set(services[n].links)) for n in closure}
    dependents: Dict[str, List[str]] = {n: [] for n in closure}
    for n in closure:
        for dep in set(services[n].links):
            dependents[dep].append(n)
    ready = [n for n, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for m in dependents[n]:
            indegree[m] -= 1
            if indegree[m] == 0:
                heapq.heappush(ready, m)
    if len(order) != len(closure):
        raise CyclicLinks("link cycle among " + ", ".join(sorted(closure - set(order))))
    return DeploymentPlan(tuple(order))


def fingerprint(engine, sdef: ServiceDef) -> str:
    """Identity used to decide whether a running container can be reused."""
    image = engine.store.resolve(sdef.image)
    blob = {"name": sdef.name, "image": image.digest, "env": sorted(_service_env(sdef).items()),
            "volumes": [str(v) for v in _service_volumes(sdef)], "role": sdef.role}
    return json.dumps(blob, sort_keys=True)


def _service_env(sdef: ServiceDef) -> Dict[str, str]:
    env = sdef.env_map
    for key in ROLE_KEYS[sdef.role]:
        env[key] = getattr(sdef, key)
    if sdef.role != "plain":
        env["targetport"] = str(sdef.port)
    return env


def _service_volumes(sdef: ServiceDef) -> Tuple[VolumeBinding, ...]:
    return sdef.volumes


def _auth_socket(sdef: ServiceDef) -> Optional[VolumeBinding]:
    for v in sdef.volumes:
        if v.container_path == AUTH_SOCK_PATH:
            return v
    return sdef.volumes[0] if sdef.volumes else None


def register_hosts(engine, spec: ComposeSpec):
    net = engine.network
    for h in spec.external_hosts:
        if h.gateway:
            if h.name not in net.gateways:
                net.add_gateway(h.name)
        elif h.name not in net.hosts:
            net.add_host(ScriptedHost(h.name, h.port, dict(h.responder)))


def _launch(engine, spec: ComposeSpec, sdef: ServiceDef, labels: Dict[str, str]):
    rt, net = engine.runtime, engine.network
    if not engine.store.has(sdef.image):
        raise UnknownImage(f"service {sdef.name}: no such image {sdef.image}")
    extra = dict(memory_limit=sdef.memory_limit, log_driver=sdef.log_driver)
    if sdef.role == "proxy":
        return net.run_proxy(sdef.name, sdef.targethost, sdef.port, image=sdef.image,
                             labels=labels, env=sdef.env_map, **extra)
    if sdef.role == "tunnel":
        sock = _auth_socket(sdef)
        if sock is None:
            raise MissingAuthSocket(f"{sdef.name}: tunnel needs an ssh agent socket volume")
        others = tuple(v for v in sdef.volumes if v != sock)
        return net.run_tunnel(sdef.name, sdef.tunneluser, sdef.tunnelhost, sdef.targethost,
                              sock, sdef.port, image=sdef.image, labels=labels,
                              env=sdef.env_map, volumes=others, **extra)
    cspec = ContainerSpec.make(sdef.image, sdef.name, env=sdef.env_map, volumes=sdef.volumes,
                               command=sdef.command, detach=True, labels=labels, **extra)
    c = rt.create(cspec)
    try:
        rt.start(c)
    except Exception:
        rt.remove(c, force=True)
        raise
    return c


def up(engine, spec: ComposeSpec, service: str, profile: Optional[str] = None) -> Deployment:
    """Start ``service`` and its dependencies in plan order.

    Running containers whose fingerprint matches are reused; anything that
    drifted is recreated. If a start fails, every container created by this
    call is removed again before the error propagates.
    """
    p = plan(spec, service, profile)
    services = spec.effective(profile)
    register_hosts(engine, spec)
    rt = engine.runtime
    dep = Deployment(spec.project, service, profile, p)
    try:
        for name in p.start:
            sdef = services[name]
            try:
                fp = fingerprint(engine, sdef)
            except NotFound:
                raise UnknownImage(f"service {name}: no such image {sdef.image}") from None
            labels = {PROJECT_LABEL: spec.project, SERVICE_LABEL: name, "minibox.fingerprint": fp}
            existing = rt.containers.get(name)
            if existing is not None:
                if existing.state == "running" and existing.spec.label_map.get("minibox.fingerprint") == fp:
                    dep.reused.append(name)
                    continue
                rt.remove(existing, force=True)
            _launch(engine, spec, sdef, labels)
            dep.created.append(name)
    except Exception:
        for name in reversed(dep.created):
            if name in rt.containers:
                rt.remove(name, force=True)
        rt.emit("rollback", project=spec.project, removed=len(dep.created))
        raise
    rt.emit("up", project=spec.project, service=service, profile=profile or "-",
            created=len(dep.created), reused=len(dep.reused))
    return dep


def down(engine, spec: ComposeSpec) -> List[str]:
    """Stop and remove every container of the project, dependents first."""
    rt = engine.runtime
    mine = [c.name for c in rt.containers.values()
            if c.spec.label_map.get(PROJECT_LABEL) == spec.project]
    services = spec.effective(None)
    order = []
    for name in sorted(services):
        for n in plan(spec, name).start:
            if n not in order:
                order.append(n)
    rank = {n: i for i, n in enumerate(order)}
    removed = []
    for name in sorted(mine, key=lambda n: -rank.get(n, -1)):
        c = rt.containers[name]
        if c.state == "running":
            rt.stop(c)
        rt.remove(c)
        removed.append(name)
    rt.emit("down", project=spec.project, removed=len(removed))
    return removed
