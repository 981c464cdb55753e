"""End-to-end scenarios replaying the narrated deployments on a fresh engine.

Each scenario returns a :class:`ScenarioResult` with named checks, scalar
metrics and plot series. The engine used is kept on the result so callers can
digest or persist it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from . import fixtures, orchestrate
from .engine import Engine
from .errors import MissingAuthSocket, PermissionDenied, UnknownScenario
from .hostmodel import fs_remove
from .netfabric import DEFAULT_LATENCY_PER_HOP_MS
from .runtime import ContainerSpec

OOM_LIMIT = 65536
OOM_WRITE = 1024
OOM_WRITES = 100
FIRETHORN_LOGS = "/var/logs/firethorn:/var/local/tomcat/logs"


@dataclass
class Check:
    label: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.label}" + (f" ({self.detail})" if self.detail else "")


@dataclass
class ScenarioResult:
    name: str
    checks: List[Check] = field(default_factory=list)
    metrics: Dict[str, int] = field(default_factory=dict)
    series: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    engine: Optional[Engine] = None

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.ok for c in self.checks)

    def check(self, label: str, ok, detail: str = "") -> bool:
        self.checks.append(Check(label, bool(ok), detail))
        return bool(ok)


def escalation(engine: Optional[Engine] = None) -> ScenarioResult:
    """A root container with the host /etc bound in can rewrite /etc/passwd."""
    e = engine or Engine.with_fixtures()
    res = ScenarioResult("escalation", engine=e)
    rt = e.runtime
    before = e.host.get("/etc/passwd")
    c = rt.run(ContainerSpec.make("debian:wheezy", "albert-root", volumes=["/etc:/albert"], detach=True))
    res.check("container runs as uid 0", c.effective_uid == 0, f"uid={c.effective_uid}")
    rt.exec(c, ["edit", "/albert/passwd", "append", "intruder:x:0:0::/root:/bin/bash"])
    after = e.host.get("/etc/passwd")
    res.check("host /etc/passwd modified through the volume",
              after.data.endswith(b"intruder:x:0:0::/root:/bin/bash\n"))
    res.check("host /etc/passwd still owned by root", after.uid == 0 and after.mode == before.mode,
              f"uid={after.uid} mode={after.mode:o}")

    host_digest = e.host.digest()
    plain = rt.run(ContainerSpec.make("debian:wheezy", "albert-plain", detach=True))
    rt.exec(plain, ["edit", "/etc/passwd", "append", "intruder:x:0:0::/root:/bin/bash"])
    inside = rt.container_fs(plain).read("/etc/passwd")
    res.check("without a volume only the overlay changes",
              e.host.digest() == host_digest and inside.endswith(b"intruder:x:0:0::/root:/bin/bash\n"))
    res.metrics.update(passwd_before=before.size, passwd_after=after.size)
    return res


def notroot(engine: Optional[Engine] = None) -> ScenarioResult:
    """The same workload through the notroot entrypoint runs as uid 1000."""
    e = engine or Engine.with_fixtures()
    res = ScenarioResult("notroot", engine=e)
    rt = e.runtime
    passwd = e.host.get("/etc/passwd").data
    c = rt.run(ContainerSpec.make("ivoa/ivoatex", "texbuild", env={"useruid": "1000"},
                                  volumes=["/work:/texdata", "/etc:/albert"], detach=True))
    res.check("notroot switched to uid 1000", c.effective_uid == 1000, f"uid={c.effective_uid}")
    try:
        rt.exec(c, ["edit", "/albert/passwd", "append", "intruder:x:0:0::/root:/bin/bash"])
        denied = False
    except PermissionDenied:
        denied = True
    res.check("edit of root-owned host passwd is PermissionDenied", denied)
    res.check("host /etc/passwd unchanged", e.host.get("/etc/passwd").data == passwd)

    out = rt.exec(c, ["make"])
    res.check("make exits 0 in /texdata", out.exit_code == 0 and c.cwd == "/texdata", f"cwd={c.cwd}")
    made = [n for n in e.host.files() if n.path.startswith("/work/") and n.path.endswith((".pdf", ".html"))]
    res.check("outputs written to host /work", len(made) == 2, ", ".join(n.path for n in made))
    res.check("outputs owned by uid 1000", made and all(n.uid == 1000 for n in made))

    fs = rt.container_fs(c, uid=0)
    users_before = fs.read("/etc/passwd").count(b"\n")
    again = rt.run(ContainerSpec.make("ivoa/ivoatex", "texbuild-2", env={"useruid": "1000"},
                                      volumes=["/work:/texdata"], detach=True))
    users_again = rt.container_fs(again, uid=0).read("/etc/passwd").count(b"\n")
    res.check("fresh container adds the account exactly once",
              users_again == users_before and again.effective_uid == 1000)
    res.metrics.update(outputs=len(made), passwd_lines=users_before)
    return res


def shared_bytes(store) -> int:
    """Bytes counted more than once across tagged images, by direct summation."""
    refcount: Dict[str, int] = {}
    for image in store.refs.values():
        for lid in image.layers:
            refcount[lid] = refcount.get(lid, 0) + 1
    return sum(store.layers[lid].size * (n - 1) for lid, n in refcount.items())


def dedup(engine: Optional[Engine] = None) -> ScenarioResult:
    """Images that share a base store it once; a warm rebuild runs nothing."""
    e = engine or Engine.with_fixtures(images=False)
    res = ScenarioResult("dedup", engine=e)
    base_layers = len(e.store.resolve("debian:wheezy").layers)
    recs = {}
    for ctx, ref in fixtures.IMAGES[:2]:
        recs[ref] = e.build_dir(fixtures.path(ctx), ref)
    nr, tex = (e.store.resolve(r) for _, r in fixtures.IMAGES[:2])
    res.check("notroot-debian adds 3 layers", len(nr.layers) - base_layers == 3, f"{len(nr.layers)} layers")
    res.check("ivoatex adds 3 layers", len(tex.layers) - len(nr.layers) == 3, f"{len(tex.layers)} layers")
    res.check("ivoatex stacks on notroot-debian", tex.layers[:len(nr.layers)] == nr.layers)
    st = e.store.stats()
    res.check("unique_bytes < referenced_bytes", st.unique_bytes < st.referenced_bytes,
              f"{st.unique_bytes} < {st.referenced_bytes}")
    shared = shared_bytes(e.store)
    res.check("difference equals shared base bytes", st.referenced_bytes - st.unique_bytes == shared,
              f"{st.referenced_bytes - st.unique_bytes} == {shared}")

    calls = e.builder.calls
    warm = {}
    for ctx, ref in fixtures.IMAGES[:2]:
        warm[ref] = e.build_dir(fixtures.path(ctx), ref)
    res.check("warm rebuild makes 0 interpreter calls", e.builder.calls == calls,
              f"{e.builder.calls - calls} calls")
    res.check("warm rebuild reproduces digest chains",
              all(warm[r].image.layers == recs[r].image.layers and warm[r].image.digest == recs[r].image.digest
                  for r in warm))
    res.metrics.update(layers=st.layer_count, unique_bytes=st.unique_bytes,
                       referenced_bytes=st.referenced_bytes, shared_bytes=shared)
    for ref in sorted(e.store.refs):
        img = e.store.refs[ref]
        res.series[ref] = [(i, float(e.store.layer_size(lid))) for i, lid in enumerate(img.layers)]
    return res


def oom_leak(engine: Optional[Engine] = None) -> ScenarioResult:
    """Memory-buffered logs get a container killed; logging to a volume does not."""
    e = engine or Engine.with_fixtures()
    res = ScenarioResult("oom-leak", engine=e)
    rt = e.runtime
    chunk = b"x" * (OOM_WRITE - 1) + b"\n"

    leaky = rt.run(ContainerSpec.make("firethorn/firethorn:2.0", "firethorn-leaky",
                                      memory_limit=OOM_LIMIT, detach=True))
    killed_at = None
    usage = []
    for i in range(1, OOM_WRITES + 1):
        rt.stdout_write(leaky, chunk)
        usage.append((i, float(leaky.account.usage)))
        if leaky.state == "oom_killed":
            killed_at = i
            break
    expect = OOM_LIMIT // OOM_WRITE + 1
    res.check(f"memory driver oom_killed at write {expect}", killed_at == expect, f"write {killed_at}")
    res.check("usage at kill exceeds limit", leaky.account.usage == expect * OOM_WRITE > OOM_LIMIT,
              f"usage={leaky.account.usage}")

    fixed = rt.run(ContainerSpec.make("firethorn/firethorn:2.0", "firethorn-fixed", memory_limit=OOM_LIMIT,
                                      volumes=[FIRETHORN_LOGS], detach=True,
                                      log_driver="volume-file:/var/local/tomcat/logs/catalina.out"))
    fixed_usage = []
    for i in range(1, OOM_WRITES + 1):
        rt.stdout_write(fixed, chunk)
        fixed_usage.append((i, float(fixed.account.usage)))
    rt.exit(fixed, 0)
    res.check("volume-file driver run exited(0)", fixed.status == "exited(0)", fixed.status)
    log = e.host.get("/var/logs/firethorn/catalina.out")
    size = log.size if log is not None else 0
    res.check(f"host log file holds {OOM_WRITES * OOM_WRITE} bytes", size == OOM_WRITES * OOM_WRITE, f"{size}")
    res.check("volume-file log buffer stays 0", fixed.account.log_buffer == 0)
    rt.remove(fixed)
    res.check("host log survives container removal", e.host.get("/var/logs/firethorn/catalina.out") is not None)
    res.metrics.update(limit=OOM_LIMIT, killed_at=killed_at or 0, host_log_bytes=size)
    res.series["memory"] = usage
    res.series["volume-file"] = fixed_usage
    return res


def run_queries(e: Engine, client: str, urls, requests) -> Tuple[List[bytes], int]:
    """Send every request to every url from ``client``; returns (responses, elapsed ms)."""
    start = e.clock.now
    out = []
    for url in urls:
        for req in requests:
            out.append(e.network.query(client, url, req))
    return out, e.clock.now - start


def ambassador_swap(engine: Optional[Engine] = None) -> ScenarioResult:
    """The tunnel profile is a drop-in for the proxy profile, only slower."""
    e = engine or Engine.with_fixtures()
    res = ScenarioResult("ambassador-swap", engine=e)
    spec = orchestrate.load_file(fixtures.path("firethorn.yml"))
    fire = spec.services["firethorn"].env_map
    urls = [fire["metadataurl"], fire["userdataurl"]]
    requests = sorted(fixtures.datahost_table())

    runs = {}
    for profile in ("proxy", "tunnel"):
        dep = orchestrate.up(e, spec, "test-suite", profile)
        res.check(f"{profile}: 6 services started", len(dep.created) == 6, " ".join(dep.plan.start))
        runs[profile] = run_queries(e, "firethorn", urls, requests)
        orchestrate.down(e, spec)
    (p_out, p_ms), (t_out, t_ms) = runs["proxy"], runs["tunnel"]
    res.check("transcripts byte-identical", p_out == t_out, f"{len(p_out)} responses")
    res.check("tunnel slower than proxy", t_ms > p_ms, f"{t_ms} ms > {p_ms} ms")
    n = len(p_out)
    res.check("extra time is 2 gateway legs per round trip",
              t_ms - p_ms == n * 2 * e.network.latency_per_hop, f"{t_ms - p_ms} ms for {n} round trips")

    e.runtime.host = fs_remove(e.host, "/tmp/ssh-agent.sock", 0)
    try:
        orchestrate.up(e, spec, "test-suite", "tunnel")
        failed = False
    except MissingAuthSocket:
        failed = True
    res.check("tunnel without agent socket fails with MissingAuthSocket", failed)
    res.check("rollback leaves no containers", not e.runtime.containers)
    res.metrics.update(round_trips=n, proxy_ms=p_ms, tunnel_ms=t_ms,
                       latency_per_hop=DEFAULT_LATENCY_PER_HOP_MS)
    res.series["proxy"] = [(i + 1, float(p_ms * (i + 1) / n)) for i in range(n)]
    res.series["tunnel"] = [(i + 1, float(t_ms * (i + 1) / n)) for i in range(n)]
    return res


SCENARIOS: Dict[str, Callable[..., ScenarioResult]] = {
    "escalation": escalation,
    "notroot": notroot,
    "dedup": dedup,
    "oom-leak": oom_leak,
    "ambassador-swap": ambassador_swap,
}


def run(name: str, engine: Optional[Engine] = None) -> ScenarioResult:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(f"unknown scenario {name!r} (choose {', '.join(SCENARIOS)})") from None
    return fn(engine)
