"""The engine bundle: image store, runtime, network and build cache together."""
from __future__ import annotations

import os
from typing import Callable, List, Optional

from . import fixtures
from .buildengine import BuildCache, BuildContext, BuildRecord, Interpreter, PackageDb, build_record
from .dockerfile import parse, parse_file
from .hostmodel import FsTree
from .imagestore import Store
from .netfabric import Network
from .runtime import Runtime, VirtualClock


class Engine:
    def __init__(self, store: Optional[Store] = None, host: Optional[FsTree] = None,
                 pkgdb: Optional[PackageDb] = None):
        self.store = store or Store()
        self.pkgdb = pkgdb or PackageDb()
        self.runtime = Runtime(self.store, host or FsTree(), self.pkgdb, VirtualClock())
        self.network = Network(self.runtime)
        self.cache = BuildCache()
        self.builder = Interpreter(self.pkgdb)

    @classmethod
    def with_fixtures(cls, images: bool = True) -> "Engine":
        """Fresh engine holding the base image, host machine and package db.

        With ``images`` the fixture Dockerfiles (notroot-debian, ivoatex and
        the firethorn set) are built as well.
        """
        eng = cls(host=fixtures.host_tree(), pkgdb=fixtures.package_db())
        fixtures.install_base(eng.store)
        eng.runtime.emit("tag", ref="debian:wheezy")
        if images:
            for ctx, ref in fixtures.IMAGES:
                eng.build_dir(fixtures.path(ctx), ref)
        return eng

    @property
    def host(self) -> FsTree:
        return self.runtime.host

    @property
    def clock(self):
        return self.runtime.clock

    @property
    def events(self) -> List[str]:
        return self.runtime.events

    def build_dir(self, path: str, ref: str,
                  progress: Optional[Callable[[str], None]] = None) -> BuildRecord:
        spec = parse_file(os.path.join(path, "Dockerfile"))
        ctx = BuildContext.from_dir(path)
        return self.build(spec, ctx, ref, progress)

    def build(self, spec, ctx: BuildContext, ref: str,
              progress: Optional[Callable[[str], None]] = None) -> BuildRecord:
        if isinstance(spec, str):
            spec = parse(spec)
        rec = build_record(spec, ctx, self.store, self.pkgdb, ref, self.cache,
                           self.builder, progress)
        self.runtime.emit("build", ref=ref, layers=len(rec.image.layers),
                          built=rec.built, cached=rec.cached, digest=rec.image.digest[:12])
        return rec
