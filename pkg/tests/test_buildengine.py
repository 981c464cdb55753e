import pytest

from minibox import fixtures
from minibox.buildengine import (
    BuildContext, Interpreter, PackageDb, TreeFs, interpret, parse_mode,
)
from minibox.dockerfile import parse, parse_file, render
from minibox.errors import (
    BaseNotFound, CopySourceMissing, InteractivePromptBlocked, UnknownCommand, UnknownPackage,
)
from minibox.hostmodel import fs_apply

NONINTERACTIVE = {"DEBIAN_FRONTEND": "noninteractive"}


def base(bare):
    return bare.store.materialize(bare.store.resolve("debian:wheezy"))


def test_install_sudo(bare):
    pkg = bare.pkgdb.packages["sudo"]
    t = interpret("apt-get update && apt-get -yq install sudo", base(bare), NONINTERACTIVE, bare.pkgdb)
    for path, size, mode in pkg.files:
        assert t[path].size == size and t[path].mode == mode
    assert b"sudo\n" in t["/var/lib/dpkg/status"].data


def test_interactive_blocked(bare):
    with pytest.raises(InteractivePromptBlocked):
        interpret("apt-get -yq install imagemagick", base(bare), {}, bare.pkgdb)
    with pytest.raises(UnknownPackage):
        interpret("apt-get -yq install nosuchpkg", base(bare), NONINTERACTIVE, bare.pkgdb)
    with pytest.raises(UnknownCommand):
        interpret("frobnicate", base(bare), {}, bare.pkgdb)


def test_chmod_symbolic():
    assert parse_mode("a+x,a-w", 0o644) == 0o555
    assert parse_mode("0755", 0o600) == 0o755
    assert parse_mode("u+w,go-r", 0o444) == 0o600


def test_builtins(bare):
    t = interpret("mkdir -p /opt/a/b && echo hi > /opt/a/b/f && echo there >> /opt/a/b/f "
                  "&& cp /opt/a/b/f /opt/g && chmod a+x,a-w /opt/g && useradd -u 1000 bob "
                  "&& groupadd -g 2000 devs && rm /opt/a/b/f", base(bare), {}, bare.pkgdb)
    assert "/opt/a/b/f" not in t
    assert t["/opt/g"].data == b"hi\nthere\n" and t["/opt/g"].mode == 0o555
    assert b"bob:x:1000" in t["/etc/passwd"].data and b"devs:x:2000" in t["/etc/group"].data


def test_package_db_round_trip(bare):
    assert PackageDb.parse(bare.pkgdb.render()).render() == bare.pkgdb.render()


def test_notroot_build(bare):
    rec = bare.build_dir(fixtures.path("notroot"), "metagrid/notroot-debian")
    img = rec.image
    assert len(rec.new_layers) == 3
    assert img.config.entrypoint == ("/notroot.sh",)
    tree = bare.store.materialize(img)
    assert tree["/notroot.sh"].mode == 0o555 and tree["/notroot.sh"].uid == 0
    assert "/usr/bin/sudo" in tree
    assert len(img.config.history) == 7 + len(bare.store.resolve("debian:wheezy").config.history)
    assert rec.steps[0].startswith("STEP 1/7: FROM debian:wheezy (base ")
    assert rec.steps[4].startswith("STEP 5/7: COPY notroot.sh /notroot.sh (built ")
    assert all(s.startswith(f"STEP {k}/7: ") for k, s in enumerate(rec.steps, 1))


def test_ivoatex_build(bare):
    bare.build_dir(fixtures.path("notroot"), "metagrid/notroot-debian")
    rec = bare.build_dir(fixtures.path("ivoatex"), "ivoa/ivoatex")
    cfg = rec.image.config
    assert len(rec.new_layers) == 3
    assert cfg.env_map["username"] == "texuser"
    assert cfg.env_map["userhome"] == "/var/local/texdata"
    assert cfg.volumes == ("/var/local/texdata",)
    assert cfg.entrypoint == ("/notroot.sh",)


def test_layer_count_law(bare):
    for ctx, ref in fixtures.IMAGES:
        spec = parse_file(fixtures.path(ctx, "Dockerfile"))
        rec = bare.build_dir(fixtures.path(ctx), ref)
        assert len(rec.new_layers) == spec.kinds.count("RUN") + spec.kinds.count("COPY")


def test_base_not_found(bare):
    with pytest.raises(BaseNotFound):
        bare.build(parse("FROM nothere\nRUN true"), BuildContext(), "x")
    with pytest.raises(CopySourceMissing):
        bare.build(parse("FROM debian:wheezy\nCOPY nope /nope"), BuildContext(), "x")


def test_env_visible_to_later_run(bare):
    rec = bare.build(parse("FROM debian:wheezy\nENV GREETING hello\nRUN echo $GREETING > /g"),
                     BuildContext(), "x")
    tree = bare.store.materialize(rec.image)
    assert "/g" in tree
    assert rec.image.config.env_map["GREETING"] == "hello"


def test_ivoatex_run_layers_reproduce_materialize(bare):
    bare.build_dir(fixtures.path("notroot"), "metagrid/notroot-debian")
    rec = bare.build_dir(fixtures.path("ivoatex"), "ivoa/ivoatex")
    tree = bare.store.materialize(bare.store.resolve("metagrid/notroot-debian"))
    for lid in rec.new_layers:
        tree = fs_apply(tree, bare.store.layer(lid))
    assert tree == bare.store.materialize(rec.image)


# -- cache ---------------------------------------------------------------------

def _fresh_chain(bare):
    bare.build_dir(fixtures.path("notroot"), "metagrid/notroot-debian")
    return bare.build_dir(fixtures.path("ivoatex"), "ivoa/ivoatex")


def test_warm_rebuild_zero_calls(bare):
    cold = _fresh_chain(bare)
    calls = bare.builder.calls
    warm = bare.build_dir(fixtures.path("ivoatex"), "ivoa/ivoatex")
    assert bare.builder.calls == calls
    assert warm.image.layers == cold.image.layers and warm.cached == 3 and warm.built == 0


def test_changed_third_run_rebuilds_only_it(bare):
    cold = _fresh_chain(bare)
    spec = parse_file(fixtures.path("ivoatex", "Dockerfile"))
    text = render(spec).replace("cm-super", "cm-super socat")
    calls = bare.builder.calls
    rec = bare.build(text, BuildContext(), "ivoa/ivoatex:changed")
    assert bare.builder.calls - calls == 1
    assert rec.image.layers[:-1] == cold.image.layers[:-1]
    assert rec.image.layers[-1] != cold.image.layers[-1]


def test_changed_copy_source_rebuilds_copy_and_later(bare):
    ctx = BuildContext.from_dir(fixtures.path("notroot"))
    spec = parse_file(fixtures.path("notroot", "Dockerfile"))
    cold = bare.build(spec, ctx, "a")
    data, mode = ctx.files["notroot.sh"]
    changed = BuildContext({"notroot.sh": (data + b"# changed\n", mode)})
    calls = bare.builder.calls
    rec = bare.build(spec, changed, "b")
    assert rec.cached == 1 and rec.built == 2
    assert bare.builder.calls - calls == 1  # only the chmod RUN re-executes
    assert rec.image.layers[:-2] == cold.image.layers[:-2]


def test_determinism_across_engines():
    from minibox.engine import Engine
    a, b = Engine.with_fixtures(), Engine.with_fixtures()
    assert {r: i.digest for r, i in a.store.refs.items()} == {r: i.digest for r, i in b.store.refs.items()}


def test_treefs_user_permissions(bare):
    fs = TreeFs(base(bare), 1000, 1000)
    from minibox.errors import PermissionDenied
    with pytest.raises(PermissionDenied):
        Interpreter(bare.pkgdb).run("echo x >> /etc/passwd", fs, {})
