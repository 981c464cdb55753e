import random
import socket
import threading

import pytest

from minibox.errors import (
    ConnectionRefused, GatewayUnreachable, MissingAuthSocket, NameInUse, ResolutionFailure,
    ResponderUnknownRequest, UnknownTarget,
)
from minibox.netfabric import Endpoint, ScriptedHost, TcpForwarder, parse_url, tcp_request
from minibox.runtime import ContainerSpec, VolumeBinding

SOCK = VolumeBinding("/tmp/ssh-agent.sock", "/tmp/ssh_auth_sock")


@pytest.fixture
def net(engine):
    engine.network.add_host(ScriptedHost("datahost", 1433, {b"Q1": b"R1", b"Q2": b"R2"}))
    engine.network.add_gateway("gateway")
    engine.runtime.run(ContainerSpec.make("firethorn/firethorn:2.0", "client", detach=True))
    return engine.network


def test_parse_url():
    assert parse_url("db://metadata/dbname") == (Endpoint("metadata", 1433), "dbname")
    assert parse_url("jdbc://metadata:1500/x")[0] == Endpoint("metadata", 1500)
    assert parse_url("metadata") == (Endpoint("metadata"), "")
    with pytest.raises(ValueError):
        Endpoint("x", 70000)


def test_proxy_relays(net):
    net.run_proxy("metadata", "datahost")
    direct = net.query("client", "datahost", b"Q1")
    assert net.query("client", "metadata:1433", b"Q1") == direct == b"R1"
    assert net.query("client", "db://metadata/dbname", b"Q1") == b"R1"


def test_independent_transcripts(net):
    net.run_proxy("metadata", "datahost")
    net.run_proxy("userdata", "datahost")
    net.query("client", "metadata", b"Q1")
    net.query("client", "userdata", b"Q2")
    a, b = net.ambassadors["metadata"].transcript, net.ambassadors["userdata"].transcript
    assert a.responses() == [b"R1"] and b.responses() == [b"R2"]
    assert not set(map(id, a.entries)) & set(map(id, b.entries))


def test_resolution(net):
    with pytest.raises(ResolutionFailure):
        net.query("client", "nobody", b"Q1")
    net.run_proxy("metadata", "datahost")
    with pytest.raises(NameInUse):
        net.run_proxy("metadata", "datahost")
    net.runtime.remove("metadata", force=True)
    with pytest.raises(ResolutionFailure):
        net.resolve("metadata")
    with pytest.raises(ResponderUnknownRequest):
        net.query("client", "datahost", b"Q9")


def test_unknown_target_detected_on_use(net):
    net.run_proxy("metadata", "elsewhere")
    with pytest.raises(UnknownTarget):
        net.query("client", "metadata", b"Q1")


def test_port_mismatch_refused(net):
    net.run_proxy("metadata", "datahost", port=1500)
    with pytest.raises(ConnectionRefused):
        net.query("client", "metadata", b"Q1")


def test_tunnel_requirements(net):
    with pytest.raises(MissingAuthSocket):
        net.run_tunnel("t", "albert", "gateway", "datahost", None)
    with pytest.raises(MissingAuthSocket):
        net.run_tunnel("t", "albert", "gateway", "datahost", VolumeBinding("/etc", "/tmp/ssh_auth_sock"))
    with pytest.raises(GatewayUnreachable):
        net.run_tunnel("t", "albert", "nogateway", "datahost", SOCK)
    assert "t" not in net.runtime.containers


def test_tunnel_latency_oracle(net):
    net.run_proxy("p", "datahost")
    net.run_tunnel("t", "albert", "gateway", "datahost", SOCK)
    reqs = [b"Q1", b"Q2"] * 5
    t0 = net.clock.now
    via_p = [net.query("client", "p", q) for q in reqs]
    t1 = net.clock.now
    via_t = [net.query("client", "t", q) for q in reqs]
    t2 = net.clock.now
    assert via_p == via_t
    assert (t2 - t1) - (t1 - t0) == len(reqs) * 2 * net.latency_per_hop
    hops = {e.hop for e in net.ambassadors["t"].transcript.entries}
    assert "t->gateway->datahost" in hops


def test_zero_latency_ties():
    from minibox.engine import Engine
    e = Engine.with_fixtures()
    e.network.latency_per_hop = 0
    e.network.add_host(ScriptedHost("db", 1433, {b"a": b"b"}))
    e.network.add_gateway("gw")
    e.network.run_proxy("p", "db")
    e.network.run_tunnel("t", "u", "gw", "db", SOCK)
    t0 = e.clock.now
    e.network.query(None, "p", b"a")
    t1 = e.clock.now
    e.network.query(None, "t", b"a")
    assert e.clock.now - t1 == t1 - t0


def test_transcript_timestamps_monotone(net):
    net.run_proxy("p", "datahost")
    ch = net.connect("client", "p")
    for q in (b"Q1", b"Q2", b"Q1"):
        net.send(ch, q)
    times = [e.at_ms for e in ch.transcript.entries]
    assert times == sorted(times)


def test_parse_table():
    table = ScriptedHost.parse_table("# c\nA\tB\nhex:00ff\thex:0102\n")
    assert table == {b"A": b"B", b"\x00\xff": b"\x01\x02"}


def test_network_json_round_trip(net):
    net.run_proxy("p", "datahost")
    net.query("client", "p", b"Q1")
    blob = net.to_json()
    net.load_json(blob)
    assert net.to_json() == blob


# -- randomized drop-in equivalence -------------------------------------------

def swap_trial(net, i, rng):
    """One random responder table queried through a proxy and a tunnel.

    Returns (proxy responses, tunnel responses, proxy ms, tunnel ms).
    """
    reqs = [bytes(rng.randrange(256) for _ in range(rng.randint(1, 12))) for _ in range(rng.randint(1, 8))]
    table = {q: bytes(rng.randrange(256) for _ in range(rng.randint(0, 40))) for q in reqs}
    net.add_host(ScriptedHost(f"db{i}", 1433, table))
    net.run_proxy(f"proxy{i}", f"db{i}")
    net.run_tunnel(f"tunnel{i}", "albert", "gateway", f"db{i}", SOCK)
    seq = [rng.choice(reqs) for _ in range(rng.randint(1, 20))]
    t0 = net.clock.now
    p = [net.query("client", f"proxy{i}", q) for q in seq]
    t1 = net.clock.now
    t = [net.query("client", f"tunnel{i}", q) for q in seq]
    t2 = net.clock.now
    assert p == [table[q] for q in seq]
    return p, t, t1 - t0, t2 - t1


def test_drop_in_random(net):
    rng = random.Random(3)
    for i in range(20):
        p, t, pm, tm = swap_trial(net, i, rng)
        assert p == t and tm > pm


# -- real sockets ---------------------------------------------------------------

def echo_server():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(8)

    def loop():
        while True:
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            with conn:
                data = b""
                while True:
                    chunk = conn.recv(4096)
                    if not chunk:
                        break
                    data += chunk
                conn.sendall(data)
    threading.Thread(target=loop, daemon=True).start()
    return srv


@pytest.mark.integration
def test_tcp_forward_echo():
    srv = echo_server()
    try:
        with TcpForwarder(0, "127.0.0.1", srv.getsockname()[1]) as fwd:
            assert tcp_request("127.0.0.1", fwd.port, b"hello ambassador") == b"hello ambassador"
    finally:
        srv.close()


@pytest.mark.integration
def test_tcp_forward_chain():
    srv = echo_server()
    try:
        with TcpForwarder(0, "127.0.0.1", srv.getsockname()[1]) as inner:
            with TcpForwarder(0, "127.0.0.1", inner.port) as outer:
                payload = bytes(range(256)) * 100
                assert tcp_request("127.0.0.1", outer.port, payload) == payload
    finally:
        srv.close()


@pytest.mark.integration
def test_tcp_forward_target_down():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    dead = s.getsockname()[1]
    s.close()
    with TcpForwarder(0, "127.0.0.1", dead) as fwd:
        with pytest.raises(ConnectionRefused):
            tcp_request("127.0.0.1", fwd.port, b"x")


@pytest.mark.integration
def test_tcp_bind_failure():
    from minibox.errors import BindFailure
    with TcpForwarder(0, "127.0.0.1", 9) as fwd:
        with pytest.raises(BindFailure):
            TcpForwarder(fwd.port, "127.0.0.1", 9).start()
