"""Image builds: a simulated shell, a package database and a build cache.

RUN steps are never executed on the real machine. :class:`Interpreter` knows a
fixed set of builtins (``apt-get``, ``chmod``, ``useradd`` ...) and applies
their effects to a filesystem view.
"""
from __future__ import annotations

import hashlib
import os
import posixpath
import re
import shlex
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple

from .dockerfile import BuildSpec, render_instruction
from .errors import (
    BaseNotFound,
    CopySourceMissing,
    FileNotFound,
    InteractivePromptBlocked,
    InterpreterError,
    NotFound,
    PermissionDenied,
    UnknownCommand,
    UnknownPackage,
)
from .hostmodel import (
    FileNode,
    FsTree,
    fs_apply,
    fs_chmod,
    fs_chown,
    fs_diff,
    fs_makedirs,
    fs_remove,
    fs_write,
    group_line,
    norm_path,
    parent_of,
    passwd_line,
    UserTable,
)
from .imagestore import Image, Store, normalize_ref

DPKG_STATUS = "/var/lib/dpkg/status"


# -- package database -------------------------------------------------------

@dataclass(frozen=True)
class Package:
    name: str
    files: Tuple[Tuple[str, int, int], ...]
    interactive: bool = False

    @property
    def total_bytes(self) -> int:
        return sum(size for _, size, _ in self.files)


class PackageDb:
    """Package manifests, loaded from ``name [interactive]; path,size,mode; ...`` records."""

    def __init__(self, packages: Iterable[Package] = ()):
        self.packages: Dict[str, Package] = {}
        for pkg in packages:
            if pkg.name in self.packages:
                raise ValueError(f"duplicate package {pkg.name}")
            self.packages[pkg.name] = pkg

    def __contains__(self, name):
        return name in self.packages

    def __getitem__(self, name) -> Package:
        try:
            return self.packages[name]
        except KeyError:
            raise UnknownPackage(f"E: Unable to locate package {name}") from None

    @classmethod
    def parse(cls, text: str) -> "PackageDb":
        pkgs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            head, *records = [part.strip() for part in line.split(";")]
            words = head.split()
            if not words or any(w != "interactive" for w in words[1:]):
                raise ValueError(f"packages line {lineno}: bad header {head!r}")
            files = []
            for rec in filter(None, records):
                path, size, mode = rec.split(",")
                files.append((norm_path(path), int(size), int(mode, 8)))
            pkgs.append(Package(words[0], tuple(files), "interactive" in words[1:]))
        return cls(pkgs)

    def render(self) -> str:
        out = []
        for name in sorted(self.packages):
            pkg = self.packages[name]
            head = name + (" interactive" if pkg.interactive else "")
            recs = [f"{p},{s},{m:04o}" for p, s, m in pkg.files]
            out.append("; ".join([head] + recs))
        return "\n".join(out) + "\n"


def synth_bytes(path: str, size: int) -> bytes:
    """Deterministic filler content seeded by the file path."""
    seed = path.encode()
    out = bytearray()
    i = 0
    while len(out) < size:
        out += hashlib.sha256(seed + b":" + str(i).encode()).digest()
        i += 1
    return bytes(out[:size])


# -- filesystem views -------------------------------------------------------

class TreeFs:
    """Mutable handle over an immutable tree, acting as one uid."""

    def __init__(self, tree: FsTree, uid: int = 0, gid: Optional[int] = None):
        self.tree = tree
        self.uid = uid
        self.gid = uid if gid is None else gid

    def get(self, path: str) -> Optional[FileNode]:
        return self.tree.get(path)

    def read(self, path: str) -> bytes:
        node = self.get(path)
        if node is None or node.is_dir:
            raise FileNotFound(f"{path}: no such file")
        return node.data

    def write(self, path: str, data: bytes, mode: int = 0o644,
              uid: Optional[int] = None, gid: Optional[int] = None):
        old = self.tree.get(path)
        if old is not None and uid is None:
            uid, gid, mode = old.uid, old.gid, old.mode
        node = FileNode(path, data, self.uid if uid is None else uid,
                        self.gid if gid is None else gid, mode)
        self.tree = fs_write(self.tree, node, self.uid, self.gid)

    def mkdir(self, path: str, parents: bool = False, mode: int = 0o755):
        if parents:
            self.tree = fs_makedirs(self.tree, path, self.uid, self.gid, mode)
        elif path not in self.tree:
            self.tree = fs_write(self.tree, FileNode.directory(path, self.uid, self.gid, mode),
                                 self.uid, self.gid)

    def remove(self, path: str, recursive: bool = False):
        self.tree = fs_remove(self.tree, path, self.uid, self.gid, recursive)

    def chmod(self, path: str, mode: int):
        self.tree = fs_chmod(self.tree, path, mode, self.uid)

    def chown(self, path: str, uid: int, gid: int):
        self.tree = fs_chown(self.tree, path, uid, gid, self.uid)

    def listdir(self, path: str) -> List[str]:
        return [posixpath.basename(p) for p in self.tree.children(path)]


# -- interpreter ------------------------------------------------------------

_SYMBOLIC = re.compile(r"^([ugoa]*)([+\-=])([rwx]*)$")
_WHO = {"u": 0o700, "g": 0o070, "o": 0o007}
_PERM = {"r": 0o444, "w": 0o222, "x": 0o111}


def parse_mode(spec: str, current: int) -> int:
    """Apply an octal or symbolic (``a+x,a-w``) chmod mode to ``current``."""
    if re.fullmatch(r"[0-7]{1,4}", spec):
        return int(spec, 8)
    mode = current & 0o7777
    for clause in spec.split(","):
        m = _SYMBOLIC.match(clause)
        if not m:
            raise UnknownCommand(f"chmod: invalid mode {spec!r}")
        who, op, perms = m.groups()
        mask = 0
        for w in (who or "a").replace("a", "ugo"):
            mask |= _WHO[w]
        bits = 0
        for p in perms:
            bits |= _PERM[p]
        bits &= mask
        if op == "+":
            mode |= bits
        elif op == "-":
            mode &= ~bits
        else:
            mode = (mode & ~mask) | bits
    return mode


@dataclass
class RunResult:
    exit_code: int = 0
    stdout: bytes = b""
    cwd: str = "/"


class Interpreter:
    """Interprets ``&&``-joined builtin commands against a filesystem view.

    ``calls`` counts every :meth:`run` invocation so build-cache tests can
    check that warm builds never reach the interpreter.
    """

    def __init__(self, pkgdb: Optional[PackageDb] = None):
        self.pkgdb = pkgdb or PackageDb()
        self.calls = 0

    def run(self, command: str, fs, env: Mapping[str, str], cwd: str = "/") -> RunResult:
        self.calls += 1
        result = RunResult(cwd=cwd)
        out = bytearray()
        for argv in split_commands(command):
            code = self._run_one(argv, fs, env, result, out)
            if code != 0:
                result.exit_code = code
                break
        result.stdout = bytes(out)
        return result

    def _run_one(self, argv: List[str], fs, env, result: RunResult, out: bytearray) -> int:
        redirect = None
        for op in (">>", ">"):
            if op in argv:
                k = argv.index(op)
                if k + 1 >= len(argv):
                    raise UnknownCommand(f"{argv[0]}: missing redirect target")
                redirect = (op, self._abs(argv[k + 1], result.cwd))
                argv = argv[:k] + argv[k + 2:]
                break
        if not argv:
            raise UnknownCommand("empty command")
        handler = getattr(self, "_cmd_" + argv[0].replace("-", "_"), None)
        if handler is None:
            raise UnknownCommand(f"{argv[0]}: command not found")
        buf = bytearray()
        code = handler(argv[1:], fs, env, result, buf)
        if redirect is None:
            out += buf
        else:
            op, path = redirect
            old = fs.get(path)
            prefix = old.data if (old is not None and op == ">>") else b""
            fs.write(path, prefix + bytes(buf))
        return code

    @staticmethod
    def _abs(path: str, cwd: str) -> str:
        return norm_path(path if path.startswith("/") else posixpath.join(cwd, path))

    # builtins: each returns an exit code and may append to ``out``

    def _cmd_true(self, args, fs, env, res, out):
        return 0

    def _cmd_false(self, args, fs, env, res, out):
        return 1

    def _cmd_sh(self, args, fs, env, res, out):
        if len(args) >= 2 and args[0] == "-c":
            sub = self.run(args[1], fs, env, res.cwd)
            self.calls -= 1
            out += sub.stdout
            res.cwd = sub.cwd
            return sub.exit_code
        return 0  # interactive shell with no input

    _cmd_bash = _cmd_sh

    def _cmd_cd(self, args, fs, env, res, out):
        target = self._abs(args[0] if args else env.get("HOME", "/"), res.cwd)
        node = fs.get(target)
        if node is None or not node.is_dir:
            raise FileNotFound(f"cd: {target}: no such directory")
        res.cwd = target
        return 0

    def _cmd_echo(self, args, fs, env, res, out):
        out += (" ".join(args) + "\n").encode()
        return 0

    def _cmd_cat(self, args, fs, env, res, out):
        for a in args:
            out += fs.read(self._abs(a, res.cwd))
        return 0

    def _cmd_touch(self, args, fs, env, res, out):
        for a in args:
            path = self._abs(a, res.cwd)
            if fs.get(path) is None:
                fs.write(path, b"")
        return 0

    def _cmd_edit(self, args, fs, env, res, out):
        """``edit PATH append TEXT`` stands in for an interactive editor session."""
        if len(args) < 3 or args[1] != "append":
            raise UnknownCommand("usage: edit PATH append TEXT")
        path = self._abs(args[0], res.cwd)
        old = fs.get(path)
        fs.write(path, (old.data if old else b"") + (" ".join(args[2:]) + "\n").encode())
        return 0

    def _cmd_mkdir(self, args, fs, env, res, out):
        parents = "-p" in args
        for a in (a for a in args if not a.startswith("-")):
            fs.mkdir(self._abs(a, res.cwd), parents=parents)
        return 0

    def _cmd_rm(self, args, fs, env, res, out):
        flags = "".join(a[1:] for a in args if a.startswith("-"))
        for a in (a for a in args if not a.startswith("-")):
            path = self._abs(a, res.cwd)
            if fs.get(path) is None:
                if "f" in flags:
                    continue
                raise FileNotFound(f"rm: {path}: no such file")
            fs.remove(path, recursive="r" in flags or "R" in flags)
        return 0

    def _cmd_cp(self, args, fs, env, res, out):
        paths = [a for a in args if not a.startswith("-")]
        if len(paths) != 2:
            raise UnknownCommand("usage: cp SRC DST")
        src, dst = (self._abs(p, res.cwd) for p in paths)
        node = fs.get(src)
        if node is None or node.is_dir:
            raise FileNotFound(f"cp: {src}: no such file")
        target = fs.get(dst)
        if target is not None and target.is_dir:
            dst = norm_path(dst + "/" + posixpath.basename(src))
        fs.write(dst, node.data, mode=node.perms)
        return 0

    def _cmd_chmod(self, args, fs, env, res, out):
        if len(args) < 2:
            raise UnknownCommand("usage: chmod MODE PATH...")
        for a in args[1:]:
            path = self._abs(a, res.cwd)
            node = fs.get(path)
            if node is None:
                raise FileNotFound(f"chmod: {path}: no such file")
            fs.chmod(path, parse_mode(args[0], node.mode))
        return 0

    def _cmd_chown(self, args, fs, env, res, out):
        if len(args) < 2:
            raise UnknownCommand("usage: chown UID[:GID] PATH...")
        owner, _, group = args[0].partition(":")
        users = read_users_from(fs)
        uid = int(owner) if owner.isdigit() else _lookup(users.user_map, owner)
        gid = int(group) if group.isdigit() else (_lookup(users.group_map, group) if group else uid)
        for a in args[1:]:
            fs.chown(self._abs(a, res.cwd), uid, gid)
        return 0

    def _cmd_useradd(self, args, fs, env, res, out):
        opts, names = _getopt(args, {"-u", "-g", "-d", "-s"})
        if len(names) != 1:
            raise UnknownCommand("usage: useradd [-u UID] [-g GID] [-d HOME] NAME")
        name = names[0]
        passwd = fs.get("/etc/passwd")
        data = passwd.data if passwd else b""
        users = read_users_from(fs)
        if name in users.user_map.values():
            return 9  # useradd: user already exists
        uid = int(opts.get("-u", max([999] + list(users.user_map)) + 1))
        if uid in users.user_map:
            return 4  # useradd: UID not unique
        gid = int(opts.get("-g", uid))
        home = opts.get("-d", f"/home/{name}")
        fs.write("/etc/passwd", data + passwd_line(name, uid, gid, home, opts.get("-s", "/bin/bash")))
        return 0

    def _cmd_groupadd(self, args, fs, env, res, out):
        opts, names = _getopt(args, {"-g"})
        if len(names) != 1:
            raise UnknownCommand("usage: groupadd [-g GID] NAME")
        users = read_users_from(fs)
        name = names[0]
        if name in users.group_map.values():
            return 9
        gid = int(opts.get("-g", max([999] + list(users.group_map)) + 1))
        if gid in users.group_map:
            return 4
        group = fs.get("/etc/group")
        fs.write("/etc/group", (group.data if group else b"") + group_line(name, gid))
        return 0

    def _cmd_apt_get(self, args, fs, env, res, out):
        words = [a for a in args if not a.startswith("-")]
        if not words:
            raise UnknownCommand("apt-get: missing subcommand")
        sub, names = words[0], words[1:]
        if sub == "update":
            return 0
        if sub != "install":
            raise UnknownCommand(f"apt-get: unsupported subcommand {sub}")
        if fs.uid != 0:
            raise PermissionDenied("apt-get: are you root?")
        pkgs = [self.pkgdb[n] for n in names]
        noninteractive = env.get("DEBIAN_FRONTEND") == "noninteractive"
        for pkg in pkgs:
            if pkg.interactive and not noninteractive:
                raise InteractivePromptBlocked(
                    f"{pkg.name}: debconf prompt needs a terminal (set DEBIAN_FRONTEND=noninteractive)")
        status = fs.get(DPKG_STATUS)
        installed = set((status.data if status else b"").decode().splitlines())
        for pkg in pkgs:
            if pkg.name in installed:
                continue
            for path, size, mode in pkg.files:
                fs.mkdir(parent_of(path), parents=True)
                fs.write(path, synth_bytes(path, size), mode=mode, uid=0, gid=0)
            installed.add(pkg.name)
            out += f"Setting up {pkg.name} ...\n".encode()
        fs.mkdir(parent_of(DPKG_STATUS), parents=True)
        fs.write(DPKG_STATUS, "".join(f"{n}\n" for n in sorted(installed)).encode())
        return 0

    def _cmd_make(self, args, fs, env, res, out):
        """Document build in the working directory, as the ivoatex tools do."""
        if fs.get("/usr/bin/make") is None:
            raise UnknownCommand("make: command not found")
        target = args[0] if args else "all"
        sources = [n for n in fs.listdir(res.cwd) if n.endswith(".tex")]
        if not sources:
            out += b"make: *** No targets specified and no makefile found.  Stop.\n"
            return 2
        for name in sorted(sources):
            stem = self._abs(name[:-4], res.cwd)
            src = fs.read(self._abs(name, res.cwd))
            tag = hashlib.sha256(src).hexdigest()[:16].encode()
            if target == "clean":
                for ext in (".pdf", ".html", ".bbl"):
                    if fs.get(stem + ext) is not None:
                        fs.remove(stem + ext)
                continue
            if target == "biblio":
                _require(fs, "/usr/bin/bibtex", "bibtex")
                fs.write(stem + ".bbl", b"% bibliography for " + tag + b"\n")
                continue
            _require(fs, "/usr/bin/pdflatex", "pdflatex")
            _require(fs, "/usr/bin/xsltproc", "xsltproc")
            fs.write(stem + ".pdf", b"%PDF-1.4\n% rendered from " + tag + b"\n")
            fs.write(stem + ".html", b"<html><!-- rendered from " + tag + b" --></html>\n")
            out += f"built {posixpath.basename(stem)}.pdf {posixpath.basename(stem)}.html\n".encode()
        return 0


def _require(fs, path, tool):
    if fs.get(path) is None:
        raise UnknownCommand(f"{tool}: command not found")


def _lookup(table: Dict[int, str], name: str) -> int:
    for k, v in table.items():
        if v == name:
            return k
    raise UnknownCommand(f"unknown user or group {name!r}")


def _getopt(args, with_value):
    opts, rest = {}, []
    it = iter(args)
    for a in it:
        if a in with_value:
            opts[a] = next(it, "")
        elif a.startswith("-"):
            continue
        else:
            rest.append(a)
    return opts, rest


def read_users_from(fs):
    passwd = fs.get("/etc/passwd")
    group = fs.get("/etc/group")
    return UserTable.from_files(passwd.data if passwd else b"", group.data if group else b"")


def split_commands(command: str) -> List[List[str]]:
    """Tokenize shell text and split it on ``&&``."""
    try:
        tokens = shlex.split(command)
    except ValueError as exc:
        raise UnknownCommand(f"cannot parse command: {exc}") from None
    groups: List[List[str]] = [[]]
    for tok in tokens:
        if tok == "&&":
            groups.append([])
        elif tok in ("|", "||", ";"):
            raise UnknownCommand(f"unsupported shell operator {tok!r}")
        else:
            groups[-1].append(tok)
    if any(not g for g in groups):
        raise UnknownCommand("empty command in && chain")
    return groups


def interpret(command: str, tree: FsTree, env: Mapping[str, str],
              pkgdb: Optional[PackageDb] = None, uid: int = 0,
              interpreter: Optional[Interpreter] = None) -> FsTree:
    """Run ``command`` as ``uid`` and return the resulting tree."""
    fs = TreeFs(tree, uid)
    (interpreter or Interpreter(pkgdb)).run(command, fs, env)
    return fs.tree


# -- build ------------------------------------------------------------------

@dataclass(frozen=True)
class BuildContext:
    """Files available to COPY, keyed by context-relative path."""

    files: Mapping[str, Tuple[bytes, int]] = field(default_factory=dict)

    def __post_init__(self):
        for rel in self.files:
            if rel.startswith("/"):
                raise ValueError(f"context paths are relative: {rel!r}")

    @classmethod
    def from_dir(cls, root: str) -> "BuildContext":
        files = {}
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames.sort()
            for name in sorted(filenames):
                full = os.path.join(dirpath, name)
                rel = os.path.relpath(full, root).replace(os.sep, "/")
                with open(full, "rb") as fh:
                    files[rel] = (fh.read(), os.stat(full).st_mode & 0o7777)
        return cls(files)

    def get(self, rel: str) -> Tuple[bytes, int]:
        key = rel if rel in self.files else posixpath.normpath(rel)
        try:
            return self.files[key]
        except KeyError:
            raise CopySourceMissing(f"COPY source {rel!r} not in build context") from None


@dataclass(frozen=True)
class CacheKey:
    parent: str
    step: str


class BuildCache:
    def __init__(self):
        self.entries: Dict[CacheKey, str] = {}

    def lookup(self, key: CacheKey) -> Optional[str]:
        return self.entries.get(key)

    def store(self, key: CacheKey, lid: str):
        self.entries[key] = lid

    def __len__(self):
        return len(self.entries)


def _env_digest(env: Mapping[str, str]) -> str:
    blob = "\0".join(f"{k}={v}" for k, v in sorted(env.items()))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class BuildRecord:
    """What :func:`build` did, step by step."""

    image: Image
    new_layers: List[str]
    steps: List[str]
    cached: int = 0
    built: int = 0


def build(spec: BuildSpec, ctx: BuildContext, store: Store, pkgdb: Optional[PackageDb],
          ref: str, cache: Optional[BuildCache] = None,
          interpreter: Optional[Interpreter] = None,
          progress: Optional[Callable[[str], None]] = None) -> Image:
    return build_record(spec, ctx, store, pkgdb, ref, cache, interpreter, progress).image


def build_record(spec: BuildSpec, ctx: BuildContext, store: Store, pkgdb: Optional[PackageDb],
                 ref: str, cache: Optional[BuildCache] = None,
                 interpreter: Optional[Interpreter] = None,
                 progress: Optional[Callable[[str], None]] = None) -> BuildRecord:
    interpreter = interpreter or Interpreter(pkgdb)
    cache = cache if cache is not None else BuildCache()
    total = len(spec.instructions)
    layers: List[str] = []
    new_layers: List[str] = []
    steps: List[str] = []
    config = None
    tree = FsTree()
    env: Dict[str, str] = {}
    declared = None
    rec = BuildRecord(None, new_layers, steps)

    for k, ins in enumerate(spec.instructions, 1):
        text = render_instruction(ins)
        status = "config"
        if ins.kind == "FROM":
            base_ref = normalize_ref(f"{ins.args[0]}:{ins.args[1]}" if ins.args[1] else ins.args[0])
            try:
                base = store.resolve(base_ref)
            except NotFound:
                raise BaseNotFound(f"base image {base_ref} not found") from None
            layers = list(base.layers)
            config = base.config
            tree = store.materialize(base)
            env = config.env_map
            status = f"base {base_ref}"
        elif ins.kind == "ENV":
            env[ins.args[0]] = ins.args[1]
            config = config.with_env(*ins.args)
        elif ins.kind == "MAINTAINER":
            config = replace(config, maintainer=ins.args[0])
        elif ins.kind == "ENTRYPOINT":
            config = replace(config, entrypoint=tuple(ins.args))
        elif ins.kind == "VOLUME":
            config = config.with_volume(ins.args[0])
        else:
            if ins.kind == "RUN":
                step = f"{text}\0env:{_env_digest(env)}"
            else:
                data, mode = ctx.get(ins.args[0])
                step = f"{text}\0src:{hashlib.sha256(data).hexdigest()}:{mode:o}"
            key = CacheKey(layers[-1] if layers else "", step)
            lid = cache.lookup(key)
            if lid is not None and lid in store.layers:
                tree = fs_apply(tree, store.layer(lid))
                rec.cached += 1
                status = f"cached {lid[:12]}"
            else:
                if ins.kind == "RUN":
                    fs = TreeFs(tree, 0)
                    result = interpreter.run(ins.args[0], fs, env)
                    if result.exit_code != 0:
                        raise InterpreterError(f"RUN exited with {result.exit_code}: {ins.args[0]}")
                    derived = fs.tree
                else:
                    derived = _copy_into(tree, ins.args[1], ins.args[0], data, mode)
                lid = store.put_layer(fs_diff(tree, derived))
                tree = derived
                cache.store(key, lid)
                rec.built += 1
                status = f"built {lid[:12]}"
            layers.append(lid)
            new_layers.append(lid)
        config = replace(config, history=config.history + (text,))
        line = f"STEP {k}/{total}: {text} ({status})"
        steps.append(line)
        if progress:
            progress(line)

    image = Image(tuple(layers), config, declared)
    store.tag(ref, image)
    rec.image = image
    return rec


def _copy_into(tree: FsTree, dest: str, src: str, data: bytes, mode: int) -> FsTree:
    if dest.endswith("/"):
        dest = dest + posixpath.basename(src)
    path = norm_path(dest if dest.startswith("/") else "/" + dest)
    tree = fs_makedirs(tree, parent_of(path), 0, 0)
    existing = tree.get(path)
    node = FileNode(path, data, 0, 0, mode & 0o7777)
    if existing is not None and existing.is_dir:
        node = FileNode(norm_path(path + "/" + posixpath.basename(src)), data, 0, 0, mode & 0o7777)
    return fs_write(tree, node, 0, 0)
