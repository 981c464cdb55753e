"""``minibox`` command line.

Every invocation loads the engine from the state directory (``--state`` or
``$MINIBOX_STATE``; created with the fixtures on first use), runs one
subcommand and saves atomically. A command that fails with a domain error
exits 1 and leaves the saved state untouched; usage errors exit 2.
"""
from __future__ import annotations

import argparse
import sys
from typing import List, Optional, Sequence

from . import __version__, orchestrate, scenarios, state
from .errors import MiniboxError
from .imagestore import normalize_ref
from .runtime import ContainerSpec

READ_ONLY = {"ps", "logs", "images", "stats", "state", "export"}


class Output:
    def __init__(self, porcelain: bool, stream=None):
        self.porcelain = porcelain
        self.stream = stream or sys.stdout

    def line(self, text: str = ""):
        print(text, file=self.stream)

    def table(self, header: Sequence[str], rows: List[Sequence]):
        rows = [[str(x) for x in r] for r in rows]
        if self.porcelain:
            for r in rows:
                self.line("\t".join(r))
            return
        widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(header)]
        for r in [list(header)] + rows:
            self.line("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())


def _kv(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key, value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minibox", description="Desk-scale container engine model.")
    p.add_argument("--state", help="state directory (default $MINIBOX_STATE or ~/.minibox)")
    p.add_argument("--porcelain", action="store_true", help="tab-separated output for scripts")
    p.add_argument("--version", action="version", version=f"minibox {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    b = sub.add_parser("build", help="build an image from a directory with a Dockerfile")
    b.add_argument("-t", "--tag", required=True, help="name:tag for the result")
    b.add_argument("path")

    r = sub.add_parser("run", help="create and start a container (command after --)")
    r.add_argument("--detach", "-d", action="store_true")
    r.add_argument("--name")
    r.add_argument("--env", "-e", action="append", type=_kv, default=[], metavar="K=V")
    r.add_argument("--volume", "-v", action="append", default=[], metavar="HOST:CONTAINER")
    r.add_argument("--memory", type=int, metavar="BYTES")
    r.add_argument("--log-driver", default="memory", metavar="{memory|volume-file[:PATH]|discard}")
    r.add_argument("--workdir", "-w")
    r.add_argument("image")

    x = sub.add_parser("exec", help="run a command in a running container (command after --)")
    x.add_argument("--user", "-u", type=int, help="uid override")
    x.add_argument("name")

    sub.add_parser("ps", help="list containers")
    lg = sub.add_parser("logs", help="print a container's log")
    lg.add_argument("name")
    st = sub.add_parser("stop", help="stop a running container")
    st.add_argument("name")
    rm = sub.add_parser("rm", help="remove a container")
    rm.add_argument("--force", "-f", action="store_true")
    rm.add_argument("name")
    sub.add_parser("images", help="list tagged images")
    sub.add_parser("stats", help="store and memory statistics")
    sub.add_parser("state", help="print the state directory digest")

    c = sub.add_parser("compose", help="multi-container deployments from YAML")
    c.add_argument("-f", "--file", required=True)
    csub = c.add_subparsers(dest="compose_command", required=True, metavar="{run,down}")
    cr = csub.add_parser("run")
    cr.add_argument("service")
    cr.add_argument("--profile")
    csub.add_parser("down")

    q = sub.add_parser("query", help="send one request over the container network")
    q.add_argument("--from", dest="client", help="client container (default: the host)")
    q.add_argument("url")
    q.add_argument("request")

    s = sub.add_parser("scenario", help="run a named end-to-end scenario on a fresh engine")
    s.add_argument("name")
    s.add_argument("--figures", metavar="DIR", help="write PNG figures into DIR")

    im = sub.add_parser("import", help="load an image archive")
    im.add_argument("archive")
    ex = sub.add_parser("export", help="write an image archive")
    ex.add_argument("ref")
    ex.add_argument("archive")
    return p


def _split_command(argv: List[str]):
    if "--" in argv:
        i = argv.index("--")
        return argv[:i], argv[i + 1:]
    return argv, None


def _default_name(engine, image: str) -> str:
    stem = normalize_ref(image).rsplit(":", 1)[0].rsplit("/", 1)[-1]
    n = engine.runtime.counter + 1
    while f"{stem}-{n}" in engine.runtime.containers:
        n += 1
    return f"{stem}-{n}"


def _cmd_build(engine, args, out: Output, command) -> int:
    rec = engine.build_dir(args.path, args.tag, progress=None if out.porcelain else out.line)
    if out.porcelain:
        out.line("\t".join(["built", normalize_ref(args.tag), rec.image.digest,
                            str(len(rec.image.layers)), str(rec.built), str(rec.cached)]))
    else:
        out.line(f"built {normalize_ref(args.tag)} {rec.image.digest[:12]} "
                 f"({len(rec.image.layers)} layers, {rec.built} built, {rec.cached} cached)")
    return 0


def _cmd_run(engine, args, out: Output, command) -> int:
    rt = engine.runtime
    spec = ContainerSpec.make(
        args.image, args.name or _default_name(engine, args.image), env=dict(args.env),
        volumes=args.volume, command=command, memory_limit=args.memory,
        log_driver=args.log_driver, detach=args.detach, workdir=args.workdir)
    c = rt.run(spec)
    if args.detach:
        out.line(c.id if not out.porcelain else f"{c.id}\t{c.name}\t{c.status}")
        return 0
    logs = rt.read_logs(c)
    if logs:
        sys.stdout.flush()
        out.stream.write(logs.decode("utf-8", "replace"))
    out.line(f"{c.name}\t{c.status}" if out.porcelain else f"{c.name} {c.status}")
    return 0


def _cmd_exec(engine, args, out: Output, command) -> int:
    result = engine.runtime.exec(args.name, command, uid_override=args.user)
    if result.stdout:
        out.stream.write(result.stdout.decode("utf-8", "replace"))
    return 0 if result.exit_code == 0 else 1


def _cmd_ps(engine, args, out: Output, command) -> int:
    out.table(("ID", "NAME", "IMAGE", "STATUS"), [s.row() for s in engine.runtime.list()])
    return 0


def _cmd_logs(engine, args, out: Output, command) -> int:
    out.stream.write(engine.runtime.read_logs(args.name).decode("utf-8", "replace"))
    return 0


def _cmd_stop(engine, args, out: Output, command) -> int:
    c = engine.runtime.stop(args.name)
    out.line(f"{c.name}\t{c.status}" if out.porcelain else f"{c.name} {c.status}")
    return 0


def _cmd_rm(engine, args, out: Output, command) -> int:
    c = engine.runtime.get(args.name)
    engine.runtime.remove(c, force=args.force)
    out.line(c.name)
    return 0


def _cmd_images(engine, args, out: Output, command) -> int:
    store = engine.store
    rows = []
    for ref in sorted(store.refs):
        img = store.refs[ref]
        declared = img.declared_size if img.declared_size is not None else "-"
        rows.append((ref, img.digest[:12], len(img.layers), store.image_size(img), declared))
    out.table(("REF", "DIGEST", "LAYERS", "BYTES", "DECLARED"), rows)
    return 0


def _cmd_stats(engine, args, out: Output, command) -> int:
    st = engine.store.stats()
    out.table(("KEY", "VALUE"), [("layers", st.layer_count), ("unique_bytes", st.unique_bytes),
                                 ("referenced_bytes", st.referenced_bytes), ("images", st.images),
                                 ("containers", len(engine.runtime.containers)),
                                 ("clock_ms", engine.clock.now)])
    rows = [(c.name, c.log_driver, c.account.usage, c.account.limit if c.account.limit is not None else "-",
             c.status) for c in engine.runtime.containers.values()]
    if rows:
        if not out.porcelain:
            out.line()
        out.table(("NAME", "LOG", "USAGE", "LIMIT", "STATUS"), rows)
    return 0


def _cmd_state(engine, args, out: Output, command) -> int:
    out.line(state.state_digest(engine))
    return 0


def _cmd_compose(engine, args, out: Output, command) -> int:
    spec = orchestrate.load_file(args.file)
    for d in spec.diagnostics:
        print(f"minibox: warning: {d}", file=sys.stderr)
    if args.compose_command == "down":
        for name in orchestrate.down(engine, spec):
            out.line(f"removed\t{name}" if out.porcelain else f"removed {name}")
        return 0
    dep = orchestrate.up(engine, spec, args.service, args.profile)
    for name in dep.plan.start:
        what = "reused" if name in dep.reused else "started"
        out.line(f"{what}\t{name}" if out.porcelain else f"{what} {name}")
    return 0


def _cmd_query(engine, args, out: Output, command) -> int:
    resp = engine.network.query(args.client, args.url, args.request.encode())
    out.line(resp.decode("utf-8", "replace"))
    return 0


def _cmd_scenario(engine, args, out: Output, command) -> int:
    res = scenarios.run(args.name)
    for c in res.checks:
        out.line(f"{'PASS' if c.ok else 'FAIL'}\t{c.label}\t{c.detail}" if out.porcelain else c.line())
    for k in sorted(res.metrics):
        out.line(f"metric\t{k}\t{res.metrics[k]}" if out.porcelain else f"  {k} = {res.metrics[k]}")
    if args.figures:
        from . import report
        for path in report.render(res, args.figures):
            out.line(f"figure\t{path}" if out.porcelain else f"  figure {path}")
    digest = state.state_digest(res.engine)
    engine.runtime.emit("scenario", name=args.name, result="PASS" if res.passed else "FAIL",
                        checks=len(res.checks), digest=digest[:16])
    out.line(f"{'PASS' if res.passed else 'FAIL'} scenario {args.name}")
    return 0 if res.passed else 1


def _cmd_import(engine, args, out: Output, command) -> int:
    with open(args.archive, "rb") as fh:
        ref, added = engine.store.import_archive(fh.read())
    engine.runtime.emit("import", ref=ref, layers=len(added))
    out.line(f"{ref}\t{len(added)}" if out.porcelain else f"imported {ref} ({len(added)} new layers)")
    return 0


def _cmd_export(engine, args, out: Output, command) -> int:
    data = engine.store.export_archive(args.ref)
    with open(args.archive, "wb") as fh:
        fh.write(data)
    out.line(f"{normalize_ref(args.ref)}\t{len(data)}" if out.porcelain
             else f"exported {normalize_ref(args.ref)} ({len(data)} bytes)")
    return 0


COMMANDS = {
    "build": _cmd_build, "run": _cmd_run, "exec": _cmd_exec, "ps": _cmd_ps, "logs": _cmd_logs,
    "stop": _cmd_stop, "rm": _cmd_rm, "images": _cmd_images, "stats": _cmd_stats,
    "state": _cmd_state, "compose": _cmd_compose, "query": _cmd_query, "scenario": _cmd_scenario,
    "import": _cmd_import, "export": _cmd_export,
}


def main(argv: Optional[Sequence[str]] = None, stdout=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    argv, command = _split_command(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if command is not None and args.command not in ("run", "exec"):
        parser.print_usage(sys.stderr)
        print("minibox: error: '--' is only valid for run and exec", file=sys.stderr)
        return 2
    if args.command == "exec" and not command:
        parser.print_usage(sys.stderr)
        print("minibox: error: exec needs a command after --", file=sys.stderr)
        return 2
    out = Output(args.porcelain, stdout)
    sd = state.StateDir(args.state)
    with sd.locked():
        fresh = not sd.exists()
        try:
            engine = sd.load_or_init()
            seen = len(engine.runtime.oom_events)
            code = COMMANDS[args.command](engine, args, out, command)
        except MiniboxError as exc:
            print(f"minibox: {exc.name}: {exc}", file=sys.stderr)
            return 1
        except ValueError as exc:
            print(f"minibox: error: {exc}", file=sys.stderr)
            return 2
        except OSError as exc:
            print(f"minibox: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 1
        for event in engine.runtime.oom_events[seen:]:
            out.line(str(event))
        if fresh or args.command not in READ_ONLY:
            sd.save(engine)
    return code


if __name__ == "__main__":
    sys.exit(main())
