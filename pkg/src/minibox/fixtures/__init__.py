"""Packaged fixtures: base image, host machine, package database, Dockerfiles."""
from __future__ import annotations

import os
from typing import List, Tuple

from ..buildengine import PackageDb, synth_bytes
from ..hostmodel import SOCKET, FileNode, FsTree, fs_diff
from ..imagestore import Image, ImageConfig

HERE = os.path.dirname(os.path.abspath(__file__))

#: (context directory, tag) in dependency order
IMAGES: List[Tuple[str, str]] = [
    ("notroot", "metagrid/notroot-debian:latest"),
    ("ivoatex", "ivoa/ivoatex:latest"),
    ("sql-proxy", "firethorn/sql-proxy:latest"),
    ("sql-tunnel", "firethorn/sql-tunnel:latest"),
    ("firethorn", "firethorn/firethorn:2.0"),
    ("ogsadai", "firethorn/ogsadai:latest"),
    ("webpy", "firethorn/webpy:latest"),
    ("pyrothorn", "firethorn/pyrothorn:latest"),
    ("mysql", "mysql:latest"),
]


def path(*parts: str) -> str:
    return os.path.join(HERE, *parts)


def read_text(name: str) -> str:
    with open(path(name), encoding="utf-8") as fh:
        return fh.read()


def notroot_script() -> bytes:
    with open(path("notroot", "notroot.sh"), "rb") as fh:
        return fh.read()


def parse_manifest(text: str) -> Tuple[FsTree, dict]:
    """Read the fixture manifest format (``d``/``f``/``t``/``s`` records)."""
    nodes = []
    meta = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        kind, rest = line.split(" ", 1)
        if kind == "declared_size":
            meta["declared_size"] = int(rest)
            continue
        fields = rest.split(" ", 4)
        p, mode, uid, gid = fields[0], int(fields[1], 8), int(fields[2]), int(fields[3])
        if kind == "d":
            nodes.append(FileNode.directory(p, uid, gid, mode))
        elif kind == "f":
            nodes.append(FileNode(p, synth_bytes(p, int(fields[4])), uid, gid, mode))
        elif kind == "t":
            text_ = fields[4].encode().decode("unicode_escape").encode()
            nodes.append(FileNode(p, text_, uid, gid, mode))
        elif kind == "s":
            nodes.append(FileNode(p, b"", uid, gid, SOCKET | mode))
        else:
            raise ValueError(f"bad manifest record {line!r}")
    tree = FsTree({n.path: n for n in nodes})
    tree.check()
    return tree, meta


def base_tree() -> Tuple[FsTree, int]:
    tree, meta = parse_manifest(read_text("debian-wheezy.manifest"))
    return tree, meta["declared_size"]


def host_tree() -> FsTree:
    return parse_manifest(read_text("host.manifest"))[0]


def package_db() -> PackageDb:
    return PackageDb.parse(read_text("packages.txt"))


def datahost_table():
    from ..netfabric import ScriptedHost
    return ScriptedHost.parse_table(read_text("datahost.responses"))


def install_base(store) -> Image:
    """Store the debian:wheezy base as a single layer, tagged wheezy and latest."""
    tree, declared = base_tree()
    lid = store.put_layer(fs_diff(FsTree(), tree))
    config = ImageConfig(env=(("PATH", "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin"),),
                         history=("ADD rootfs.tar /",))
    image = Image((lid,), config, declared)
    store.tag("debian:wheezy", image)
    store.tag("debian:latest", image)
    return image
