"""In-memory filesystem model with POSIX-style ownership.

Trees are values: every operation returns a new :class:`FsTree` and leaves its
inputs untouched. Directories are nodes too (``is_dir=True``) so that their
ownership and mode take part in permission checks and in layer diffs.
"""
from __future__ import annotations

import base64
import hashlib
import os
import stat
from dataclasses import dataclass, replace
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple
from urllib.parse import quote, unquote

from .errors import ConflictingDiff, FileNotFound, MissingParent, PermissionDenied

PERM_MASK = 0o7777
#: reserved type marker for ssh-agent socket fixtures
SOCKET = stat.S_IFSOCK


def norm_path(path: str) -> str:
    """Normalize an absolute path, collapsing ``.``, ``..`` and repeated slashes."""
    if not path.startswith("/"):
        raise ValueError(f"path must be absolute: {path!r}")
    parts: List[str] = []
    for part in path.split("/"):
        if part in ("", "."):
            continue
        if part == "..":
            if parts:
                parts.pop()
            continue
        parts.append(part)
    return "/" + "/".join(parts)


def parent_of(path: str) -> str:
    head = path.rsplit("/", 1)[0]
    return head or "/"


def ancestors(path: str) -> Iterator[str]:
    """Yield every proper ancestor of ``path``, outermost first."""
    parts = path.strip("/").split("/")[:-1]
    yield "/"
    for i in range(1, len(parts) + 1):
        yield "/" + "/".join(parts[:i])


@dataclass(frozen=True)
class FileNode:
    path: str
    data: bytes = b""
    uid: int = 0
    gid: int = 0
    mode: int = 0o644
    is_dir: bool = False

    def __post_init__(self):
        if self.path != norm_path(self.path):
            raise ValueError(f"path not normalized: {self.path!r}")
        if self.uid < 0 or self.gid < 0:
            raise ValueError("uid/gid must be non-negative")

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def perms(self) -> int:
        return self.mode & PERM_MASK

    @property
    def is_socket(self) -> bool:
        return stat.S_IFMT(self.mode) == SOCKET

    @classmethod
    def directory(cls, path, uid=0, gid=0, mode=0o755):
        return cls(path, b"", uid, gid, mode, True)


ROOT = FileNode.directory("/")


class FsTree(Mapping[str, FileNode]):
    """Immutable mapping of normalized path to :class:`FileNode`."""

    __slots__ = ("_nodes", "_digest")

    def __init__(self, nodes: Optional[Mapping[str, FileNode]] = None):
        d = dict(nodes) if nodes else {}
        d.setdefault("/", ROOT)
        self._nodes = d
        self._digest = None

    def __getitem__(self, path):
        return self._nodes[path]

    def __iter__(self):
        return iter(self._nodes)

    def __len__(self):
        return len(self._nodes)

    def __eq__(self, other):
        if isinstance(other, FsTree):
            return self._nodes == other._nodes
        return NotImplemented

    def __hash__(self):
        return hash(self.digest())

    def __repr__(self):
        return f"FsTree({len(self._nodes)} nodes, {self.digest()[:12]})"

    @property
    def nodes(self) -> Dict[str, FileNode]:
        return dict(self._nodes)

    @property
    def directories(self) -> frozenset:
        return frozenset(p for p, n in self._nodes.items() if n.is_dir)

    def files(self) -> Iterator[FileNode]:
        for path in sorted(self._nodes):
            node = self._nodes[path]
            if not node.is_dir:
                yield node

    def children(self, path: str) -> List[str]:
        prefix = path.rstrip("/") + "/"
        return sorted(p for p in self._nodes
                      if p.startswith(prefix) and "/" not in p[len(prefix):] and p != "/")

    def subtree(self, path: str) -> List[str]:
        """``path`` and all paths below it, deepest first."""
        prefix = path.rstrip("/") + "/"
        hits = [p for p in self._nodes if p == path or p.startswith(prefix)]
        return sorted(hits, key=lambda p: (-p.count("/"), p))

    def with_nodes(self, nodes: Iterable[FileNode] = (), removed: Iterable[str] = ()) -> "FsTree":
        d = dict(self._nodes)
        for path in removed:
            d.pop(path, None)
        for node in nodes:
            d[node.path] = node
        return FsTree(d)

    def total_bytes(self) -> int:
        return sum(n.size for n in self._nodes.values())

    def digest(self) -> str:
        if self._digest is None:
            self._digest = hashlib.sha256(serialize_tree(self)).hexdigest()
        return self._digest

    def check(self):
        """Raise ConflictingDiff unless every node's parent is a directory."""
        for path, node in self._nodes.items():
            if path == "/":
                if not node.is_dir:
                    raise ConflictingDiff("root is not a directory")
                continue
            parent = self._nodes.get(parent_of(path))
            if parent is None or not parent.is_dir:
                raise ConflictingDiff(f"{path}: parent directory missing")


# -- permissions ------------------------------------------------------------

def may_write(node: FileNode, uid: int, gids: Iterable[int]) -> bool:
    """Simplified POSIX write check: any matching class with its write bit set."""
    if uid == 0:
        return True
    m = node.perms
    if node.uid == uid and m & 0o200:
        return True
    if node.gid in set(gids) and m & 0o020:
        return True
    return bool(m & 0o002)


def fs_write(tree: FsTree, node: FileNode, actor_uid: int,
             actor_gid: Optional[int] = None) -> FsTree:
    """Create or overwrite ``node.path`` on behalf of ``actor_uid``.

    Root keeps the ownership and mode carried by ``node``. Other actors become
    the owner of files they create; an overwrite keeps the existing owner and
    mode, as a write(2) into an existing file would.
    """
    gid = actor_uid if actor_gid is None else actor_gid
    parent = tree.get(parent_of(node.path))
    if parent is None or not parent.is_dir:
        raise MissingParent(f"{parent_of(node.path)}: no such directory")
    existing = tree.get(node.path)
    if existing is not None:
        if existing.is_dir != node.is_dir:
            raise ConflictingDiff(f"{node.path}: file/directory type mismatch")
        if not may_write(existing, actor_uid, (gid,)):
            raise PermissionDenied(f"{node.path}: permission denied (uid {actor_uid})")
        if actor_uid != 0:
            node = replace(node, uid=existing.uid, gid=existing.gid, mode=existing.mode)
    else:
        if not may_write(parent, actor_uid, (gid,)):
            raise PermissionDenied(f"{parent.path}: permission denied (uid {actor_uid})")
        if actor_uid != 0:
            node = replace(node, uid=actor_uid, gid=gid)
    return tree.with_nodes([node])


def fs_remove(tree: FsTree, path: str, actor_uid: int, actor_gid: Optional[int] = None,
              recursive: bool = False) -> FsTree:
    gid = actor_uid if actor_gid is None else actor_gid
    if path not in tree:
        raise FileNotFound(f"{path}: no such file or directory")
    if path == "/":
        raise PermissionDenied("refusing to remove /")
    victims = tree.subtree(path)
    if len(victims) > 1 and not recursive:
        raise ConflictingDiff(f"{path}: directory not empty")
    for victim in victims:
        if not may_write(tree[parent_of(victim)], actor_uid, (gid,)):
            raise PermissionDenied(f"{victim}: permission denied (uid {actor_uid})")
    return tree.with_nodes(removed=victims)


def fs_chmod(tree: FsTree, path: str, mode: int, actor_uid: int) -> FsTree:
    node = tree.get(path)
    if node is None:
        raise FileNotFound(f"{path}: no such file or directory")
    if actor_uid not in (0, node.uid):
        raise PermissionDenied(f"{path}: not owner (uid {actor_uid})")
    kind = stat.S_IFMT(node.mode)
    return tree.with_nodes([replace(node, mode=kind | (mode & PERM_MASK))])


def fs_chown(tree: FsTree, path: str, uid: int, gid: int, actor_uid: int) -> FsTree:
    node = tree.get(path)
    if node is None:
        raise FileNotFound(f"{path}: no such file or directory")
    if actor_uid != 0:
        raise PermissionDenied(f"{path}: chown requires root")
    return tree.with_nodes([replace(node, uid=uid, gid=gid)])


def fs_makedirs(tree: FsTree, path: str, actor_uid: int, actor_gid: Optional[int] = None,
                mode: int = 0o755) -> FsTree:
    for p in list(ancestors(path)) + [path]:
        node = tree.get(p)
        if node is None:
            tree = fs_write(tree, FileNode.directory(p, actor_uid, actor_gid or 0, mode),
                            actor_uid, actor_gid)
        elif not node.is_dir:
            raise ConflictingDiff(f"{p}: not a directory")
    return tree


# -- user table --------------------------------------------------------------

@dataclass(frozen=True)
class UserTable:
    users: Tuple[Tuple[int, str], ...] = ((0, "root"),)
    groups: Tuple[Tuple[int, str], ...] = ((0, "root"),)

    @property
    def user_map(self) -> Dict[int, str]:
        return dict(self.users)

    @property
    def group_map(self) -> Dict[int, str]:
        return dict(self.groups)

    def has_user(self, uid: int) -> bool:
        return uid in self.user_map

    def has_group(self, gid: int) -> bool:
        return gid in self.group_map

    def add_user(self, uid: int, name: str) -> "UserTable":
        if name in self.user_map.values() or uid in self.user_map:
            raise ValueError(f"user {name} ({uid}) already defined")
        return replace(self, users=tuple(sorted(self.users + ((uid, name),))))

    def add_group(self, gid: int, name: str) -> "UserTable":
        if name in self.group_map.values() or gid in self.group_map:
            raise ValueError(f"group {name} ({gid}) already defined")
        return replace(self, groups=tuple(sorted(self.groups + ((gid, name),))))

    @classmethod
    def from_files(cls, passwd: bytes, group: bytes) -> "UserTable":
        """Read ``/etc/passwd`` and ``/etc/group`` content; junk lines are skipped."""
        def table(data, idx):
            rows = {}
            for line in data.decode("utf-8", "replace").splitlines():
                fields = line.split(":")
                if len(fields) > idx and fields[idx].isdigit():
                    rows.setdefault(int(fields[idx]), fields[0])
            return tuple(sorted(rows.items()))
        return cls(table(passwd, 2) or ((0, "root"),), table(group, 2) or ((0, "root"),))


def read_users(tree: FsTree) -> UserTable:
    passwd = tree.get("/etc/passwd")
    group = tree.get("/etc/group")
    return UserTable.from_files(passwd.data if passwd else b"", group.data if group else b"")


def passwd_line(name: str, uid: int, gid: int, home: str, shell: str = "/bin/bash") -> bytes:
    return f"{name}:x:{uid}:{gid}:{name}:{home}:{shell}\n".encode()


def group_line(name: str, gid: int) -> bytes:
    return f"{name}:x:{gid}:\n".encode()


# -- diffs ------------------------------------------------------------------

ADD, MODIFY, DELETE = "add", "modify", "delete"


@dataclass(frozen=True)
class Change:
    op: str
    node: Optional[FileNode] = None


class LayerDiff(Mapping[str, Change]):
    """Path-keyed set of changes between two trees."""

    __slots__ = ("_changes",)

    def __init__(self, changes: Optional[Mapping[str, Change]] = None):
        self._changes = dict(changes or {})
        for path, change in self._changes.items():
            if change.op not in (ADD, MODIFY, DELETE):
                raise ValueError(f"bad change op {change.op!r}")
            if change.op != DELETE and (change.node is None or change.node.path != path):
                raise ValueError(f"{path}: change node does not match its path")

    def __getitem__(self, path):
        return self._changes[path]

    def __iter__(self):
        return iter(self._changes)

    def __len__(self):
        return len(self._changes)

    def __eq__(self, other):
        if isinstance(other, LayerDiff):
            return self._changes == other._changes
        return NotImplemented

    def __hash__(self):
        return hash(self.digest())

    def __repr__(self):
        ops = {}
        for c in self._changes.values():
            ops[c.op] = ops.get(c.op, 0) + 1
        return f"LayerDiff({ops})"

    @property
    def size(self) -> int:
        """Content bytes carried by this layer."""
        return sum(c.node.size for c in self._changes.values() if c.node is not None)

    def digest(self) -> str:
        return hashlib.sha256(serialize_diff(self)).hexdigest()


def fs_diff(base: FsTree, derived: FsTree) -> LayerDiff:
    changes = {}
    for path, node in derived.items():
        old = base.get(path)
        if old is None:
            changes[path] = Change(ADD, node)
        elif old != node:
            changes[path] = Change(MODIFY, node)
    for path in base:
        if path not in derived:
            changes[path] = Change(DELETE)
    return LayerDiff(changes)


def fs_apply(base: FsTree, diff: LayerDiff) -> FsTree:
    if not diff:
        return base
    nodes = base.nodes
    for path, change in diff.items():
        present = path in nodes
        if change.op == ADD and present:
            raise ConflictingDiff(f"{path}: add over existing path")
        if change.op != ADD and not present:
            raise ConflictingDiff(f"{path}: {change.op} of missing path")
        if change.op == DELETE:
            del nodes[path]
        else:
            nodes[path] = change.node
    if "/" not in nodes:
        raise ConflictingDiff("diff removes the root directory")
    tree = FsTree(nodes)
    tree.check()
    return tree


# -- canonical serialization -----------------------------------------------

_SAFE = "/._-+@:,~"


def _node_fields(node: FileNode) -> List[str]:
    return [
        "d" if node.is_dir else "f",
        format(node.mode, "o"),
        str(node.uid),
        str(node.gid),
        str(node.size),
        hashlib.sha256(node.data).hexdigest(),
        base64.b64encode(node.data).decode("ascii"),
    ]


def _parse_node(path: str, fields: List[str]) -> FileNode:
    kind, mode, uid, gid, size, digest, blob = fields
    data = base64.b64decode(blob.encode("ascii"), validate=True)
    if len(data) != int(size) or hashlib.sha256(data).hexdigest() != digest:
        raise ValueError(f"{path}: content digest mismatch")
    return FileNode(path, data, int(uid), int(gid), int(mode, 8), kind == "d")


def serialize_tree(tree: FsTree) -> bytes:
    """Sorted, timestamp-free snapshot: one tab-separated record per node."""
    lines = []
    for path in sorted(tree):
        lines.append("\t".join([quote(path, safe=_SAFE)] + _node_fields(tree[path])))
    return ("\n".join(lines) + "\n").encode("ascii")


def parse_tree(blob: bytes) -> FsTree:
    nodes = {}
    for line in blob.decode("ascii").splitlines():
        if not line:
            continue
        fields = line.split("\t")
        path = unquote(fields[0])
        nodes[path] = _parse_node(path, fields[1:])
    return FsTree(nodes)


def serialize_diff(diff: LayerDiff) -> bytes:
    lines = []
    for path in sorted(diff):
        change = diff[path]
        fields = [change.op, quote(path, safe=_SAFE)]
        if change.node is not None:
            fields += _node_fields(change.node)
        lines.append("\t".join(fields))
    return ("\n".join(lines) + "\n").encode("ascii")


def parse_diff(blob: bytes) -> LayerDiff:
    changes = {}
    for line in blob.decode("ascii").splitlines():
        if not line:
            continue
        fields = line.split("\t")
        op, path = fields[0], unquote(fields[1])
        if path in changes:
            raise ValueError(f"{path}: duplicate entry")
        node = _parse_node(path, fields[2:]) if op != DELETE else None
        changes[path] = Change(op, node)
    return LayerDiff(changes)


# -- real-disk import/export (fixtures only) --------------------------------

def import_dir(root: str, uid: int = 0, gid: int = 0) -> FsTree:
    """Load a real directory as a tree, keeping permission bits only."""
    nodes = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        rel = os.path.relpath(dirpath, root)
        base = "/" if rel == "." else norm_path("/" + rel)
        if base != "/":
            st = os.stat(dirpath)
            nodes.append(FileNode.directory(base, uid, gid, st.st_mode & PERM_MASK))
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            with open(full, "rb") as fh:
                data = fh.read()
            mode = os.stat(full).st_mode & PERM_MASK
            nodes.append(FileNode(norm_path(base + "/" + name), data, uid, gid, mode))
    return FsTree({n.path: n for n in nodes})


def export_dir(tree: FsTree, root: str) -> None:
    for path in sorted(tree):
        node = tree[path]
        target = os.path.join(root, path.lstrip("/"))
        if node.is_dir:
            os.makedirs(target, exist_ok=True)
        else:
            os.makedirs(os.path.dirname(target), exist_ok=True)
            with open(target, "wb") as fh:
                fh.write(node.data)
            os.chmod(target, node.perms)
