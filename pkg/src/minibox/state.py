"""Saving and loading a whole engine to a state directory.

Layout::

    STATE/
      VERSION                 format marker, checked on load
      CURRENT                 name of the live snapshot (replaced atomically)
      lock                    flock target serializing CLI invocations
      layers/<id>.diff        content-addressed layer and overlay blobs, shared
      snapshots/<name>/       one text or JSON file per concern

A save writes a complete new snapshot under a temporary name, renames it into
place, then swaps ``CURRENT``. A crash at any point leaves the previous
snapshot live.
"""
from __future__ import annotations

import base64
import contextlib
import fcntl
import hashlib
import json
import os
import shutil
import tempfile
from typing import Dict, Optional

from .buildengine import CacheKey, PackageDb
from .engine import Engine
from .errors import StateVersionMismatch
from .hostmodel import fs_apply, fs_diff, parse_diff, parse_tree, serialize_diff, serialize_tree
from .imagestore import Image, layer_id
from .logdrivers import LogDriverKind, MemoryAccount, OomEvent
from .runtime import Container, ContainerSpec, VolumeBinding

STATE_VERSION = 1
VERSION_LINE = f"minibox-state {STATE_VERSION}\n"
ENV_VAR = "MINIBOX_STATE"


def default_dir() -> str:
    return os.environ.get(ENV_VAR) or os.path.join(os.path.expanduser("~"), ".minibox")


# -- engine <-> files ---------------------------------------------------------

def _spec_json(spec: ContainerSpec) -> dict:
    return {
        "image": spec.image, "name": spec.name, "env": [list(p) for p in spec.env],
        "volumes": [str(v) for v in spec.volumes], "memory_limit": spec.memory_limit,
        "log_driver": str(spec.log_driver), "detach": spec.detach,
        "command": list(spec.command) if spec.command is not None else None,
        "workdir": spec.workdir, "base_usage": spec.base_usage,
        "labels": [list(p) for p in spec.labels],
    }


def _spec_from_json(d: dict) -> ContainerSpec:
    return ContainerSpec(
        d["image"], d["name"], tuple(tuple(p) for p in d["env"]),
        tuple(VolumeBinding.parse(v) for v in d["volumes"]), d["memory_limit"],
        LogDriverKind.parse(d["log_driver"]), d["detach"],
        tuple(d["command"]) if d["command"] is not None else None,
        d["workdir"], d["base_usage"], tuple(tuple(p) for p in d["labels"]))


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


def snapshot(engine: Engine) -> Dict[str, bytes]:
    """Files of one snapshot, plus every layer blob under ``layers/<id>.diff``."""
    rt, store = engine.runtime, engine.store
    files: Dict[str, bytes] = {"version": VERSION_LINE.encode()}
    for lid, diff in store.layers.items():
        files[f"layers/{lid}.diff"] = serialize_diff(diff)
    files["store.txt"] = "".join(f"{lid}\n" for lid in sorted(store.layers)).encode()
    files["refs.txt"] = "".join(
        f"{ref}\t{store.refs[ref].canonical().decode()}\n" for ref in sorted(store.refs)).encode()
    files["cache.txt"] = "".join(
        f"{k.parent}\t{json.dumps(k.step)}\t{lid}\n"
        for k, lid in sorted(engine.cache.entries.items(), key=lambda kv: (kv[0].parent, kv[0].step))
    ).encode()
    files["packages.txt"] = engine.pkgdb.render().encode()
    files["host.tree"] = serialize_tree(rt.host)

    rows = []
    for c in rt.containers.values():
        overlay = fs_diff(c.lower, c.rootfs)
        oid = layer_id(overlay)
        files[f"layers/{oid}.diff"] = serialize_diff(overlay)
        rows.append({
            "id": c.id, "spec": _spec_json(c.spec), "image": c.image.to_json(),
            "overlay": oid, "env": sorted(c.env.items()), "log_driver": str(c.log_driver),
            "state": c.state, "exit_code": c.exit_code, "uid": c.effective_uid,
            "gid": c.effective_gid, "cwd": c.cwd,
            "account": [c.account.limit, c.account.base_usage, c.account.log_buffer],
            "log": base64.b64encode(bytes(c.log)).decode(),
        })
    files["containers.json"] = _dump_json(rows)
    files["network.json"] = _dump_json(engine.network.to_json())
    files["clock.txt"] = f"now {rt.clock.now}\ncounter {rt.counter}\n".encode()
    files["oom.txt"] = "".join(
        f"{e.container_id}\t{e.name}\t{e.usage}\t{e.limit}\t{e.at_ms}\n" for e in rt.oom_events).encode()
    files["events.log"] = "".join(f"{line}\n" for line in rt.events).encode()
    return files


def state_digest(engine_or_files) -> str:
    """sha256 over every snapshot file, name and content, in sorted order."""
    files = engine_or_files if isinstance(engine_or_files, dict) else snapshot(engine_or_files)
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(f"{name}\0{len(files[name])}\0".encode())
        h.update(files[name])
    return h.hexdigest()


def restore(files: Dict[str, bytes]) -> Engine:
    if files.get("version", b"").decode() != VERSION_LINE:
        raise StateVersionMismatch(
            f"state format {files.get('version', b'?').decode().strip()!r}, expected {VERSION_LINE.strip()!r}")

    def layer(lid):
        return parse_diff(files[f"layers/{lid}.diff"])

    engine = Engine(host=parse_tree(files["host.tree"]),
                    pkgdb=PackageDb.parse(files["packages.txt"].decode()))
    store, rt = engine.store, engine.runtime
    for lid in files["store.txt"].decode().split():
        store.layers[lid] = layer(lid)
    for line in files["refs.txt"].decode().splitlines():
        ref, blob = line.split("\t", 1)
        store.refs[ref] = Image.from_json(json.loads(blob))
    for line in files["cache.txt"].decode().splitlines():
        parent, step, lid = line.split("\t")
        engine.cache.store(CacheKey(parent, json.loads(step)), lid)

    for row in json.loads(files["containers.json"]):
        image = Image.from_json(row["image"])
        lower = store.materialize(image)
        limit, base, buf = row["account"]
        c = Container(row["id"], _spec_from_json(row["spec"]), image, lower,
                      fs_apply(lower, layer(row["overlay"])), dict(row["env"]),
                      LogDriverKind.parse(row["log_driver"]), row["state"], row["exit_code"],
                      row["uid"], row["gid"], row["cwd"], MemoryAccount(limit, base, buf),
                      bytearray(base64.b64decode(row["log"])))
        rt.containers[c.name] = c
    engine.network.load_json(json.loads(files["network.json"]))
    clock = dict(line.split() for line in files["clock.txt"].decode().splitlines())
    rt.clock.now, rt.counter = int(clock["now"]), int(clock["counter"])
    for line in files["oom.txt"].decode().splitlines():
        cid, name, usage, limit, at = line.split("\t")
        rt.oom_events.append(OomEvent(cid, name, int(usage), int(limit), int(at)))
    rt.events[:] = files["events.log"].decode().splitlines()
    return engine


# -- the directory ------------------------------------------------------------

class StateDir:
    def __init__(self, root: Optional[str] = None):
        self.root = os.path.abspath(root or default_dir())

    def _p(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    @contextlib.contextmanager
    def locked(self):
        """Exclusive lock for the duration of one command."""
        os.makedirs(self.root, exist_ok=True)
        with open(self._p("lock"), "a+") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield self
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def exists(self) -> bool:
        return os.path.exists(self._p("CURRENT"))

    def current(self) -> Optional[str]:
        try:
            with open(self._p("CURRENT"), encoding="ascii") as fh:
                return fh.read().strip()
        except FileNotFoundError:
            return None

    def read_files(self) -> Dict[str, bytes]:
        with open(self._p("VERSION"), encoding="ascii") as fh:
            marker = fh.read()
        if marker != VERSION_LINE:
            raise StateVersionMismatch(f"{self.root}: state format {marker.strip()!r} not supported")
        snap = self._p("snapshots", self.current())
        files = {}
        for name in os.listdir(snap):
            with open(os.path.join(snap, name), "rb") as fh:
                files[name] = fh.read()
        wanted = set(files["store.txt"].decode().split())
        wanted.update(r["overlay"] for r in json.loads(files["containers.json"]))
        for lid in wanted:
            with open(self._p("layers", f"{lid}.diff"), "rb") as fh:
                files[f"layers/{lid}.diff"] = fh.read()
        return files

    def load(self) -> Engine:
        return restore(self.read_files())

    def load_or_init(self) -> Engine:
        if self.exists():
            return self.load()
        return Engine.with_fixtures()

    def save(self, engine: Engine) -> str:
        """Write a new snapshot and make it current; returns the state digest."""
        files = snapshot(engine)
        os.makedirs(self._p("layers"), exist_ok=True)
        os.makedirs(self._p("snapshots"), exist_ok=True)
        _write_atomic(self._p("VERSION"), VERSION_LINE.encode())
        layer_names = []
        for name, data in files.items():
            if name.startswith("layers/"):
                layer_names.append(name[len("layers/"):])
                target = self._p(name)
                if not os.path.exists(target):
                    _write_atomic(target, data)
        old = self.current()
        seq = int(old.split("-")[1]) + 1 if old else 1
        snap_name = f"snap-{seq:06d}"
        tmp = tempfile.mkdtemp(prefix=".tmp-", dir=self._p("snapshots"))
        for name, data in files.items():
            if not name.startswith("layers/"):
                with open(os.path.join(tmp, name), "wb") as fh:
                    fh.write(data)
        os.replace(tmp, self._p("snapshots", snap_name))
        _write_atomic(self._p("CURRENT"), f"{snap_name}\n".encode())
        self._prune(snap_name, set(layer_names))
        return state_digest(files)

    def _prune(self, keep: str, layers: set):
        for name in os.listdir(self._p("snapshots")):
            if name != keep:
                shutil.rmtree(self._p("snapshots", name), ignore_errors=True)
        for name in os.listdir(self._p("layers")):
            if name not in layers:
                os.unlink(self._p("layers", name))

    def digest(self) -> str:
        return state_digest(self.read_files())


def _write_atomic(path: str, data: bytes):
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=os.path.dirname(path))
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)

