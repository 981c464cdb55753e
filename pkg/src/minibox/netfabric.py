"""Virtual container network with ambassador containers.

Containers reach each other by name. An ambassador is a small container that
listens on a port (1433 by default) and relays each request to a target host,
either directly (``sql-proxy``) or through an ssh gateway (``sql-tunnel``).
Both relay the same bytes; the tunnel costs extra virtual time per round trip.
"""
from __future__ import annotations

import base64
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple
from urllib.parse import urlsplit

from .errors import (
    BindFailure,
    ConnectionRefused,
    GatewayUnreachable,
    MissingAuthSocket,
    NameInUse,
    NotRunning,
    ResolutionFailure,
    ResponderUnknownRequest,
    UnknownTarget,
)
from .runtime import ContainerSpec, Runtime, VolumeBinding

DEFAULT_PORT = 1433
DEFAULT_HOP_MS = 1
DEFAULT_LATENCY_PER_HOP_MS = 40
PROXY_IMAGE = "firethorn/sql-proxy"
TUNNEL_IMAGE = "firethorn/sql-tunnel"
AUTH_SOCK_PATH = "/tmp/ssh_auth_sock"


@dataclass(frozen=True)
class Endpoint:
    name: str
    port: int = DEFAULT_PORT

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port out of range: {self.port}")


def parse_url(url: str) -> Tuple[Endpoint, str]:
    """``scheme://name[:port]/dbname`` -> (Endpoint, dbname); bare names pass through."""
    if "://" not in url:
        name, _, port = url.partition(":")
        return Endpoint(name, int(port) if port else DEFAULT_PORT), ""
    parts = urlsplit(url)
    if not parts.hostname:
        raise ResolutionFailure(f"no host in {url!r}")
    return Endpoint(parts.hostname, parts.port or DEFAULT_PORT), parts.path.lstrip("/")


@dataclass(frozen=True)
class Route:
    kind: str
    target_host: str
    target_port: int = DEFAULT_PORT
    tunnel_user: Optional[str] = None
    gateway: Optional[str] = None
    auth_socket: Optional[VolumeBinding] = None
    latency_per_hop: int = 0

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["auth_socket"] = str(self.auth_socket) if self.auth_socket else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Route":
        d = dict(d)
        if d.get("auth_socket"):
            d["auth_socket"] = VolumeBinding.parse(d["auth_socket"])
        return cls(**d)


@dataclass(frozen=True)
class TranscriptEntry:
    direction: str
    data: bytes
    at_ms: int
    hop: str


@dataclass
class Transcript:
    entries: List[TranscriptEntry] = field(default_factory=list)

    def append(self, direction: str, data: bytes, at_ms: int, hop: str):
        if self.entries and at_ms < self.entries[-1].at_ms:
            raise ValueError("transcript timestamps must not decrease")
        self.entries.append(TranscriptEntry(direction, bytes(data), at_ms, hop))

    def responses(self) -> List[bytes]:
        return [e.data for e in self.entries if e.direction == "response"]

    def requests(self) -> List[bytes]:
        return [e.data for e in self.entries if e.direction == "request"]

    def to_json(self) -> list:
        return [[e.direction, base64.b64encode(e.data).decode(), e.at_ms, e.hop]
                for e in self.entries]

    @classmethod
    def from_json(cls, rows) -> "Transcript":
        return cls([TranscriptEntry(d, base64.b64decode(b), t, h) for d, b, t, h in rows])


def _decode_field(text: str) -> bytes:
    if text.startswith("hex:"):
        return bytes.fromhex(text[4:])
    return text.encode("utf-8")


@dataclass
class ScriptedHost:
    """An external machine answering from a fixed request -> response table."""

    name: str
    port: int = DEFAULT_PORT
    responder: Dict[bytes, bytes] = field(default_factory=dict)
    log: Transcript = field(default_factory=Transcript)

    def respond(self, request: bytes) -> bytes:
        try:
            return self.responder[request]
        except KeyError:
            raise ResponderUnknownRequest(f"{self.name}: no response for {request[:40]!r}") from None

    @staticmethod
    def parse_table(text: str) -> Dict[bytes, bytes]:
        table = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            req, sep, resp = line.partition("\t")
            if not sep:
                raise ValueError(f"responder line needs a TAB: {line!r}")
            table[_decode_field(req)] = _decode_field(resp)
        return table

    def to_json(self) -> dict:
        return {"name": self.name, "port": self.port,
                "responder": [[base64.b64encode(k).decode(), base64.b64encode(v).decode()]
                              for k, v in sorted(self.responder.items())],
                "log": self.log.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "ScriptedHost":
        table = {base64.b64decode(k): base64.b64decode(v) for k, v in d["responder"]}
        return cls(d["name"], d["port"], table, Transcript.from_json(d["log"]))


@dataclass
class Ambassador:
    name: str
    container_id: str
    port: int
    route: Route
    transcript: Transcript = field(default_factory=Transcript)


@dataclass
class Channel:
    client: str
    endpoint: Endpoint
    dbname: str = ""
    transcript: Transcript = field(default_factory=Transcript)


class Network:
    def __init__(self, runtime: Runtime, hop_ms: int = DEFAULT_HOP_MS,
                 latency_per_hop: int = DEFAULT_LATENCY_PER_HOP_MS):
        self.runtime = runtime
        self.hop_ms = hop_ms
        self.latency_per_hop = latency_per_hop
        self.hosts: Dict[str, ScriptedHost] = {}
        self.gateways: set = set()
        self.ambassadors: Dict[str, Ambassador] = {}
        runtime.listeners.append(self._on_remove)

    @property
    def clock(self):
        return self.runtime.clock

    def _on_remove(self, container):
        amb = self.ambassadors.get(container.name)
        if amb is not None and amb.container_id == container.id:
            del self.ambassadors[container.name]

    def _check_free(self, name: str):
        if name in self.runtime.containers or name in self.hosts or name in self.gateways:
            raise NameInUse(f"name {name!r} already in use on the network")

    def add_host(self, host: ScriptedHost) -> ScriptedHost:
        self._check_free(host.name)
        self.hosts[host.name] = host
        return host

    def add_gateway(self, name: str):
        self._check_free(name)
        self.gateways.add(name)

    # -- ambassadors ------------------------------------------------------

    def run_proxy(self, name: str, targethost: str, port: int = DEFAULT_PORT,
                  image: str = PROXY_IMAGE, labels=None, env=None, **spec_kw):
        self._check_free(name)
        route = Route("direct", targethost, port)
        env = dict(env or {}, targethost=targethost, targetport=str(port))
        return self._launch(name, image, env, (), route, labels, spec_kw)

    def run_tunnel(self, name: str, tunneluser: str, tunnelhost: str, targethost: str,
                   auth_socket: Optional[VolumeBinding], port: int = DEFAULT_PORT,
                   image: str = TUNNEL_IMAGE, latency_per_hop: Optional[int] = None,
                   labels=None, env=None, volumes=(), **spec_kw):
        self._check_free(name)
        if auth_socket is None:
            raise MissingAuthSocket(f"{name}: no ssh agent socket binding")
        node = self.runtime.host.get(auth_socket.host_path)
        if node is None or not node.is_socket:
            raise MissingAuthSocket(f"{name}: {auth_socket.host_path} is not an ssh agent socket")
        if tunnelhost not in self.gateways:
            raise GatewayUnreachable(f"{name}: ssh gateway {tunnelhost!r} unreachable")
        lat = self.latency_per_hop if latency_per_hop is None else latency_per_hop
        route = Route("tunnel", targethost, port, tunneluser, tunnelhost, auth_socket, lat)
        env = dict(env or {}, tunneluser=tunneluser, tunnelhost=tunnelhost,
                   targethost=targethost, targetport=str(port))
        vols = tuple(volumes) if auth_socket in volumes else (auth_socket,) + tuple(volumes)
        return self._launch(name, image, env, vols, route, labels, spec_kw)

    def _launch(self, name, image, env, volumes, route, labels, spec_kw):
        spec = ContainerSpec.make(image, name, env=env, volumes=volumes, detach=True,
                                  labels=labels, **spec_kw)
        c = self.runtime.create(spec)
        try:
            self.runtime.start(c)
        except Exception:
            self.runtime.remove(c, force=True)
            raise
        self.ambassadors[name] = Ambassador(name, c.id, route.target_port, route)
        self.runtime.emit("ambassador", c, route=route.kind, target=route.target_host)
        return c

    # -- traffic ----------------------------------------------------------

    def resolve(self, name: str):
        """Live ambassador or scripted host registered under ``name``."""
        amb = self.ambassadors.get(name)
        if amb is not None:
            c = self.runtime.containers.get(name)
            if c is not None and c.id == amb.container_id and c.state == "running":
                return amb
        if name in self.hosts:
            return self.hosts[name]
        raise ResolutionFailure(f"cannot resolve {name!r}")

    def names(self) -> Dict[str, Endpoint]:
        out = {}
        for name in sorted(set(self.ambassadors) | set(self.hosts)):
            try:
                target = self.resolve(name)
            except ResolutionFailure:
                continue
            out[name] = Endpoint(name, target.port)
        return out

    def connect(self, client: Optional[str], target: str, port: Optional[int] = None) -> Channel:
        """Open a channel from ``client`` (a container name, or None for the host)."""
        if client is not None:
            c = self.runtime.get(client)
            if c.state != "running":
                raise NotRunning(f"client {client} is not running")
        endpoint, dbname = parse_url(target)
        if port is not None:
            endpoint = Endpoint(endpoint.name, port)
        dest = self.resolve(endpoint.name)
        if dest.port != endpoint.port:
            raise ConnectionRefused(f"{endpoint.name}:{endpoint.port} refused connection")
        return Channel(client or "host", endpoint, dbname)

    def _hop(self, ms: int) -> int:
        return self.clock.advance(ms)

    def send(self, channel: Channel, data: bytes) -> bytes:
        dest = self.resolve(channel.endpoint.name)
        channel.transcript.append("request", data, self.clock.now, f"{channel.client}->{channel.endpoint.name}")
        if isinstance(dest, ScriptedHost):
            self._hop(self.hop_ms)
            dest.log.append("request", data, self.clock.now, channel.client)
            response = dest.respond(data)
            self._hop(self.hop_ms)
            channel.transcript.append("response", response, self.clock.now, f"{dest.name}->{channel.client}")
            return response

        amb, route = dest, dest.route
        host = self.hosts.get(route.target_host)
        if host is None:
            raise UnknownTarget(f"{amb.name}: target host {route.target_host!r} unknown")
        if host.port != route.target_port:
            raise ConnectionRefused(f"{route.target_host}:{route.target_port} refused connection")
        if route.kind == "tunnel":
            if route.gateway not in self.gateways:
                raise GatewayUnreachable(f"{amb.name}: gateway {route.gateway!r} unreachable")
            path = f"{amb.name}->{route.gateway}->{host.name}"
            leg = self.hop_ms + route.latency_per_hop
        else:
            path = f"{amb.name}->{host.name}"
            leg = self.hop_ms

        self._hop(self.hop_ms)
        amb.transcript.append("request", data, self.clock.now, f"{channel.client}->{amb.name}")
        self._hop(leg)
        host.log.append("request", data, self.clock.now, path)
        response = host.respond(data)
        self._hop(leg)
        amb.transcript.append("response", response, self.clock.now, path)
        self._hop(self.hop_ms)
        channel.transcript.append("response", response, self.clock.now, f"{amb.name}->{channel.client}")
        return response

    def query(self, client: Optional[str], url: str, request: bytes) -> bytes:
        return self.send(self.connect(client, url), request)

    # -- persistence ------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "hop_ms": self.hop_ms,
            "latency_per_hop": self.latency_per_hop,
            "hosts": [self.hosts[n].to_json() for n in sorted(self.hosts)],
            "gateways": sorted(self.gateways),
            "ambassadors": [
                {"name": a.name, "container_id": a.container_id, "port": a.port,
                 "route": a.route.to_json(), "transcript": a.transcript.to_json()}
                for a in (self.ambassadors[n] for n in sorted(self.ambassadors))
            ],
        }

    def load_json(self, d: dict):
        self.hop_ms = d["hop_ms"]
        self.latency_per_hop = d["latency_per_hop"]
        self.hosts = {h["name"]: ScriptedHost.from_json(h) for h in d["hosts"]}
        self.gateways = set(d["gateways"])
        self.ambassadors = {
            a["name"]: Ambassador(a["name"], a["container_id"], a["port"],
                                  Route.from_json(a["route"]), Transcript.from_json(a["transcript"]))
            for a in d["ambassadors"]
        }


# -- real loopback forwarding ------------------------------------------------

class TcpForwarder:
    """Relay bytes between a loopback listen port and a target, like socat.

    If the target refuses, the accepted client connection is reset so the
    failure reaches the client instead of looking like an empty reply.
    """

    def __init__(self, listen_port: int, target_host: str, target_port: int,
                 listen_host: str = "127.0.0.1"):
        self.listen = (listen_host, listen_port)
        self.target = (target_host, target_port)
        self._sock: Optional[socket.socket] = None
        self._threads: List[threading.Thread] = []
        self._closing = threading.Event()

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1] if self._sock else self.listen[1]

    def start(self) -> "TcpForwarder":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind(self.listen)
        except OSError as exc:
            sock.close()
            raise BindFailure(f"cannot bind {self.listen[0]}:{self.listen[1]}: {exc}") from None
        sock.listen(16)
        sock.settimeout(0.2)
        self._sock = sock
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def stop(self):
        self._closing.set()
        if self._sock is not None:
            self._sock.close()
        for t in self._threads:
            t.join(timeout=2)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _accept_loop(self):
        while not self._closing.is_set():
            try:
                client, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._serve, args=(client,), daemon=True).start()

    def _serve(self, client: socket.socket):
        try:
            upstream = socket.create_connection(self.target, timeout=5)
        except OSError:
            client.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
            client.close()
            return
        a = threading.Thread(target=_pump, args=(client, upstream), daemon=True)
        b = threading.Thread(target=_pump, args=(upstream, client), daemon=True)
        a.start()
        b.start()
        a.join()
        b.join()
        client.close()
        upstream.close()


def _pump(src: socket.socket, dst: socket.socket):
    try:
        while True:
            chunk = src.recv(65536)
            if not chunk:
                break
            dst.sendall(chunk)
    except OSError:
        pass
    try:
        dst.shutdown(socket.SHUT_WR)
    except OSError:
        pass


def tcp_request(host: str, port: int, data: bytes, timeout: float = 5.0) -> bytes:
    """Send ``data``, half-close, and read the reply until EOF."""
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            sock.sendall(data)
            sock.shutdown(socket.SHUT_WR)
            chunks = []
            while True:
                chunk = sock.recv(65536)
                if not chunk:
                    break
                chunks.append(chunk)
    except (ConnectionRefusedError, ConnectionResetError, BrokenPipeError) as exc:
        raise ConnectionRefused(f"{host}:{port}: {exc}") from None
    return b"".join(chunks)
