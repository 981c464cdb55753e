import random

import pytest
import yaml

from minibox import fixtures, orchestrate
from minibox.errors import (
    BadSubstitution, CyclicLinks, MiniboxError, MissingAuthSocket, ParseError, UnknownImage,
    UnknownService,
)
from minibox.hostmodel import fs_remove

from .oracles import closure, topo_ok


@pytest.fixture
def spec():
    return orchestrate.load_file(fixtures.path("firethorn.yml"))


def doc(services, **extra):
    return yaml.safe_dump(dict({"minibox": 1, "services": services}, **extra))


def test_load_fixture(spec):
    assert sorted(spec.services) == ["firethorn", "gui", "metadata", "ogsadai", "results-db",
                                     "test-suite", "userdata"]
    assert sorted(spec.profiles) == ["proxy", "tunnel"]
    assert spec.services["metadata"].role == "proxy"
    assert spec.profiles["tunnel"]["metadata"].role == "tunnel"
    assert [h.name for h in spec.external_hosts] == ["datahost", "gateway"]
    assert spec.diagnostics == []


def test_load_errors():
    with pytest.raises(CyclicLinks):
        orchestrate.load(doc({"a": {"image": "x", "links": ["b"]}, "b": {"image": "x", "links": ["a"]}}))
    with pytest.raises(ParseError):
        orchestrate.load("services: {a: {image: x}}")
    with pytest.raises(ParseError):
        orchestrate.load(doc({"a": {"image": "x", "role": "proxy"}}))
    with pytest.raises(UnknownService):
        orchestrate.load(doc({"a": {"image": "x", "links": ["ghost"]}}))
    with pytest.raises(ParseError):
        orchestrate.load("minibox: 1\nservices: [")


def test_bad_substitution():
    base = {"m": {"image": "p", "role": "proxy", "targethost": "h"}}
    with pytest.raises(BadSubstitution):
        orchestrate.load(doc(base, profiles={"t": {"m": {"image": "p", "role": "proxy",
                                                         "targethost": "h", "port": 1500}}}))
    with pytest.raises(BadSubstitution):
        orchestrate.load(doc(base, profiles={"t": {"other": {"image": "p"}}}))


def test_unknown_keys_are_diagnostics():
    s = orchestrate.load(doc({"a": {"image": "x", "restart": "always"}}, extras=1))
    assert len(s.diagnostics) == 2


def test_plan_examples(spec):
    order = orchestrate.plan(spec, "test-suite").start
    assert len(order) == 6 and order[-1] == "test-suite" and "gui" not in order
    for svc in ("metadata", "userdata", "ogsadai", "firethorn"):
        assert order.index(svc) < order.index("test-suite")
    assert orchestrate.plan(spec, "gui", "tunnel").start == orchestrate.plan(spec, "gui", "proxy").start
    assert orchestrate.plan(spec, "results-db").start == ("results-db",)
    assert orchestrate.plan(spec, "gui").stop[0] == "gui"
    with pytest.raises(UnknownService):
        orchestrate.plan(spec, "nothing")


def random_dag(rng, n):
    names = [f"s{i:02d}" for i in range(n)]
    rng.shuffle(names)
    links = {}
    for i, name in enumerate(names):
        earlier = names[:i]
        links[name] = sorted(rng.sample(earlier, rng.randint(0, min(3, len(earlier)))))
    return links


def check_random_plans(count, seed=0):
    rng = random.Random(seed)
    for _ in range(count):
        links = random_dag(rng, rng.randint(1, 12))
        s = orchestrate.load(doc({n: {"image": "debian:wheezy", "links": l} for n, l in links.items()}))
        target = rng.choice(sorted(links))
        order = orchestrate.plan(s, target).start
        assert topo_ok(order, links), (links, target, order)
        assert set(order) == closure(target, links)
        assert order == orchestrate.plan(s, target).start
    return True


def test_random_plans():
    assert check_random_plans(100, seed=11)


def test_up_idempotent_and_down(engine, spec):
    first = orchestrate.up(engine, spec, "test-suite", "proxy")
    assert len(first.created) == 6
    second = orchestrate.up(engine, spec, "test-suite", "proxy")
    assert second.created == [] and len(second.reused) == 6
    labels = engine.runtime.containers["firethorn"].spec.label_map
    assert labels[orchestrate.SERVICE_LABEL] == "firethorn"
    orchestrate.down(engine, spec)
    assert engine.runtime.list() == []


def test_up_recreates_on_drift(engine, spec):
    orchestrate.up(engine, spec, "test-suite", "proxy")
    third = orchestrate.up(engine, spec, "test-suite", "tunnel")
    assert sorted(third.created) == ["metadata", "userdata"]


def test_tunnel_without_socket_rolls_back(engine, spec):
    engine.runtime.host = fs_remove(engine.host, "/tmp/ssh-agent.sock", 0)
    with pytest.raises(MissingAuthSocket):
        orchestrate.up(engine, spec, "gui", "tunnel")
    assert engine.runtime.list() == []


def test_missing_image_is_unknown_image(engine):
    s = orchestrate.load(doc({"a": {"image": "debian:wheezy"}, "b": {"image": "ghost", "links": ["a"]}}))
    with pytest.raises(UnknownImage):
        orchestrate.up(engine, s, "b")
    assert engine.runtime.list() == []


def inject_failure(engine, spec, k, profile=None):
    """Make the k-th container start fail; returns names left running."""
    rt = engine.runtime
    real = rt.start
    calls = {"n": 0}

    def flaky(ref):
        calls["n"] += 1
        if calls["n"] == k:
            raise MiniboxError("injected start failure")
        return real(ref)

    rt.start = flaky
    try:
        with pytest.raises(MiniboxError):
            orchestrate.up(engine, spec, "test-suite", profile)
    finally:
        rt.start = real
    return [c.name for c in rt.containers.values() if c.state == "running"]


@pytest.mark.parametrize("k", range(1, 7))
def test_mid_up_failure_leaves_nothing(engine, spec, k):
    assert inject_failure(engine, spec, k) == []
    assert engine.runtime.list() == []


def test_failure_keeps_preexisting(engine, spec):
    orchestrate.up(engine, spec, "ogsadai")
    before = sorted(engine.runtime.containers)
    assert sorted(inject_failure(engine, spec, 1)) == before  # results-db fails to start
    assert sorted(engine.runtime.containers) == before
