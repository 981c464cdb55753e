import random

import pytest
from hypothesis import given, settings, strategies as st

from minibox import fixtures
from minibox.dockerfile import BuildSpec, Instruction, parse, parse_file, render, validate, format_error
from minibox.errors import (
    DanglingContinuation, DockerfileError, MalformedArgs, MissingFrom, UnknownKeyword,
)

IVOATEX_KINDS = ["FROM", "MAINTAINER", "ENV", "RUN", "RUN", "RUN", "ENV", "ENV", "VOLUME"]
NOTROOT_KINDS = ["FROM", "MAINTAINER", "ENV", "RUN", "COPY", "RUN", "ENTRYPOINT"]


def test_ivoatex_listing():
    spec = parse_file(fixtures.path("ivoatex", "Dockerfile"))
    assert spec.kinds == IVOATEX_KINDS
    assert spec.instructions[0].args == ("metagrid/notroot-debian", None)
    assert spec.instructions[6].args == ("username", "texuser")
    assert spec.instructions[8].args == ("/var/local/texdata",)
    assert validate(spec) == []


def test_notroot_listing():
    spec = parse_file(fixtures.path("notroot", "Dockerfile"))
    assert spec.kinds == NOTROOT_KINDS
    assert spec.instructions[3].args == ("apt-get update && apt-get -yq install sudo",)
    assert spec.instructions[4].args == ("notroot.sh", "/notroot.sh")
    assert spec.instructions[5].args == ("chmod a+x,a-w /notroot.sh",)
    assert spec.instructions[6].args == ("/notroot.sh",)


def test_continuation_join():
    spec = parse("FROM debian:wheezy\nRUN apt-get update \\\n && apt-get -yq install sudo")
    assert spec.instructions[1].args == ("apt-get update && apt-get -yq install sudo",)
    assert spec.instructions[1].span == (2, 3)


def test_continuation_join_is_associative():
    parts = ["a", "  b", "c  ", " d"]
    once = parse("FROM x\nRUN " + " \\\n".join(parts))
    pairwise = parse("FROM x\nRUN " + " ".join(p.strip() for p in parts))
    assert once.instructions[1].args == pairwise.instructions[1].args


def test_keywords_case_insensitive():
    spec = parse("from debian:wheezy\nenv A=1\nrun true")
    assert spec.kinds == ["FROM", "ENV", "RUN"]
    assert spec.instructions[1].args == ("A", "1")


@pytest.mark.parametrize("text,err", [
    ("", MissingFrom),
    ("# only a comment\n\n", MissingFrom),
    ("RUN true", MissingFrom),
    ("FROM x\nCMD true", UnknownKeyword),
    ("FROM x\nCOPY a", MalformedArgs),
    ("FROM x\nENTRYPOINT /notroot.sh", MalformedArgs),
    ("FROM x\nRUN true \\", DanglingContinuation),
    ("FROM", MalformedArgs),
])
def test_parse_errors(text, err):
    with pytest.raises(err):
        parse(text)


def test_error_format():
    with pytest.raises(DockerfileError) as info:
        parse("FROM x\nADD a b")
    assert format_error(info.value).startswith("2:1: error:")


def test_render_examples():
    assert render(parse("FROM debian:wheezy")) == "FROM debian:wheezy"
    assert render(parse("FROM x\nENV username texuser")).splitlines()[1] == "ENV username texuser"


def test_round_trip_fixture_listing():
    spec = parse_file(fixtures.path("ivoatex", "Dockerfile"))
    assert parse(render(spec)) == spec


def test_validate():
    assert [d.severity for d in validate(parse("FROM x\nVOLUME texdata"))] == ["error"]
    two = validate(parse('FROM x\nENTRYPOINT ["/a"]\nENTRYPOINT ["/b"]'))
    assert len(two) == 1 and two[0].severity == "warning"
    dup = validate(parse("FROM x\nENV A 1\nENV A 2"))
    assert len(dup) == 1 and str(dup[0]).startswith("3:1: warning:")


@given(st.binary(max_size=300))
@settings(max_examples=300, deadline=None)
def test_parse_is_total(blob):
    try:
        parse(blob)
    except DockerfileError:
        pass


# -- randomized round trip ----------------------------------------------------

word = st.text("abcdefghijklmnopqrstuvwxyz0123456789_-.", min_size=1, max_size=8)
text = st.lists(st.text("abcdefghijklmnopqrstuvwxyz0123456789_-./=&>\"'$ ", min_size=1, max_size=10)
                .map(str.strip).filter(bool), min_size=1, max_size=5).map(" ".join)
abspath = st.lists(word, min_size=1, max_size=4).map(lambda p: "/" + "/".join(p))
env_key = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,8}", fullmatch=True)

instruction = st.one_of(
    st.builds(lambda k, v: Instruction("ENV", (k, v)), env_key, text),
    st.builds(lambda t: Instruction("RUN", (t,)), text),
    st.builds(lambda t: Instruction("MAINTAINER", (t,)), text),
    st.builds(lambda p: Instruction("VOLUME", (p,)), abspath),
    st.builds(lambda s, d: Instruction("COPY", (s, d)), word, abspath),
    st.builds(lambda a: Instruction("ENTRYPOINT", tuple(a)), st.lists(text, min_size=1, max_size=3)),
)
from_ins = st.builds(lambda n, t: Instruction("FROM", (n, t)),
                     st.lists(word, min_size=1, max_size=3).map("/".join), st.none() | word)
specs = st.builds(lambda f, rest: BuildSpec((f,) + tuple(rest)), from_ins, st.lists(instruction, max_size=12))


@given(specs)
@settings(max_examples=1000, deadline=None)
def test_round_trip_random_specs(spec):
    assert parse(render(spec)) == spec


# the same shapes from a seeded rng, cheap enough for the acceptance gate
WORD = "abcdefghijklmnopqrstuvwxyz0123456789_-."
TEXT = "abcdefghijklmnopqrstuvwxyz0123456789_-./=&>\"'$ "


def _chars(rng, alphabet, lo, hi):
    return "".join(rng.choice(alphabet) for _ in range(rng.randint(lo, hi)))


def _text(rng):
    parts = []
    while len(parts) < rng.randint(1, 5):
        part = _chars(rng, TEXT, 1, 10).strip()
        if part:
            parts.append(part)
    return " ".join(parts)


def _abspath(rng):
    return "/" + "/".join(_chars(rng, WORD, 1, 8) for _ in range(rng.randint(1, 4)))


def random_spec(rng):
    key = rng.choice("ABCxyz_") + _chars(rng, "ABCxyz_019", 0, 8)
    makers = [
        lambda: Instruction("ENV", (key, _text(rng))),
        lambda: Instruction("RUN", (_text(rng),)),
        lambda: Instruction("MAINTAINER", (_text(rng),)),
        lambda: Instruction("VOLUME", (_abspath(rng),)),
        lambda: Instruction("COPY", (_chars(rng, WORD, 1, 8), _abspath(rng))),
        lambda: Instruction("ENTRYPOINT", tuple(_text(rng) for _ in range(rng.randint(1, 3)))),
    ]
    name = "/".join(_chars(rng, WORD, 1, 8) for _ in range(rng.randint(1, 3)))
    tag = rng.choice([None, _chars(rng, WORD, 1, 8)])
    rest = [rng.choice(makers)() for _ in range(rng.randint(0, 12))]
    return BuildSpec((Instruction("FROM", (name, tag)),) + tuple(rest))


def test_round_trip_seeded_specs():
    rng = random.Random(17)
    for _ in range(1000):
        spec = random_spec(rng)
        assert parse(render(spec)) == spec
