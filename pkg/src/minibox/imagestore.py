"""Content-addressed layer store, image references and archive registry."""
from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from .dockerfile import split_ref
from .errors import CorruptArchive, DanglingLayer, NotFound
from .hostmodel import FsTree, LayerDiff, fs_apply, parse_diff, serialize_diff

ARCHIVE_MAGIC = "minibox-archive v1"


def normalize_ref(ref: str) -> str:
    """``debian`` -> ``debian:latest``; explicit tags are kept."""
    name, tag = split_ref(ref)
    return f"{name}:{tag or 'latest'}"


def layer_id(diff: LayerDiff) -> str:
    return diff.digest()


@dataclass(frozen=True)
class ImageConfig:
    env: Tuple[Tuple[str, str], ...] = ()
    entrypoint: Optional[Tuple[str, ...]] = None
    volumes: Tuple[str, ...] = ()
    maintainer: Optional[str] = None
    history: Tuple[str, ...] = ()

    @property
    def env_map(self) -> Dict[str, str]:
        return dict(self.env)

    def with_env(self, key: str, value: str) -> "ImageConfig":
        env = dict(self.env)
        env[key] = value
        return replace(self, env=tuple(env.items()))

    def with_volume(self, path: str) -> "ImageConfig":
        return replace(self, volumes=tuple(sorted(set(self.volumes) | {path})))

    def to_json(self) -> dict:
        return {
            "env": [list(kv) for kv in self.env],
            "entrypoint": list(self.entrypoint) if self.entrypoint is not None else None,
            "volumes": list(self.volumes),
            "maintainer": self.maintainer,
            "history": list(self.history),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ImageConfig":
        ep = d.get("entrypoint")
        return cls(
            env=tuple((k, v) for k, v in d.get("env", [])),
            entrypoint=tuple(ep) if ep is not None else None,
            volumes=tuple(d.get("volumes", [])),
            maintainer=d.get("maintainer"),
            history=tuple(d.get("history", [])),
        )


@dataclass(frozen=True)
class Image:
    layers: Tuple[str, ...]
    config: ImageConfig = field(default_factory=ImageConfig)
    declared_size: Optional[int] = None

    def to_json(self) -> dict:
        return {"layers": list(self.layers), "config": self.config.to_json(),
                "declared_size": self.declared_size}

    @classmethod
    def from_json(cls, d: dict) -> "Image":
        return cls(tuple(d["layers"]), ImageConfig.from_json(d["config"]),
                   d.get("declared_size"))

    def canonical(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical()).hexdigest()


@dataclass(frozen=True)
class StoreStats:
    layer_count: int
    unique_bytes: int
    referenced_bytes: int
    images: int


class Store:
    """Layers keyed by content digest plus ``name:tag`` references.

    Readers may share a store freely; ``put_layer``, ``tag`` and
    ``import_archive`` take :attr:`lock`, which callers can also hold to group
    several writes.
    """

    def __init__(self):
        self.layers: Dict[str, LayerDiff] = {}
        self.refs: Dict[str, Image] = {}
        self.lock = threading.RLock()
        self._trees: Dict[Tuple[str, ...], FsTree] = {}

    def put_layer(self, diff: LayerDiff) -> str:
        lid = layer_id(diff)
        with self.lock:
            self.layers.setdefault(lid, diff)
        return lid

    def layer(self, lid: str) -> LayerDiff:
        try:
            return self.layers[lid]
        except KeyError:
            raise DanglingLayer(f"layer {lid[:12]} not in store") from None

    def tag(self, ref: str, image: Image) -> "Store":
        missing = [lid for lid in image.layers if lid not in self.layers]
        if missing:
            raise DanglingLayer(f"layer {missing[0][:12]} not in store")
        with self.lock:
            self.refs[normalize_ref(ref)] = image
        return self

    def resolve(self, ref: str) -> Image:
        try:
            return self.refs[normalize_ref(ref)]
        except KeyError:
            raise NotFound(f"no such image: {ref}") from None

    def has(self, ref: str) -> bool:
        return normalize_ref(ref) in self.refs

    def materialize(self, image: Image) -> FsTree:
        """Apply ``image.layers`` in order over an empty tree.

        Results are memoized per layer prefix, which is safe because trees are
        immutable values.
        """
        chain = tuple(image.layers)
        if chain in self._trees:
            return self._trees[chain]
        k = len(chain)
        while k > 0 and chain[:k] not in self._trees:
            k -= 1
        tree = self._trees[chain[:k]] if k else FsTree()
        for i in range(k, len(chain)):
            tree = fs_apply(tree, self.layer(chain[i]))
            self._trees[chain[:i + 1]] = tree
        return tree

    def layer_size(self, lid: str) -> int:
        return self.layer(lid).size

    def image_size(self, image: Image) -> int:
        return sum(self.layer_size(lid) for lid in image.layers)

    def stats(self) -> StoreStats:
        unique = sum(d.size for d in self.layers.values())
        referenced = sum(self.image_size(img) for img in self.refs.values())
        return StoreStats(len(self.layers), unique, referenced, len(self.refs))

    def verify(self) -> List[str]:
        """Return ids whose stored content no longer hashes to the id."""
        return [lid for lid, d in self.layers.items() if layer_id(d) != lid]

    # -- archives --------------------------------------------------------

    def export_archive(self, ref: str) -> bytes:
        """Serialize one image: text manifest, blobs, then a whole-file checksum."""
        ref = normalize_ref(ref)
        image = self.resolve(ref)
        config = image.canonical()
        blobs = [serialize_diff(self.layer(lid)) for lid in image.layers]
        lines = [ARCHIVE_MAGIC, f"ref {ref}",
                 f"config {hashlib.sha256(config).hexdigest()} {len(config)}"]
        for lid, blob in zip(image.layers, blobs):
            lines.append(f"layer {lid} {len(blob)}")
        body = ("\n".join(lines) + "\n\n").encode() + config + b"".join(blobs)
        return body + f"\nchecksum {hashlib.sha256(body).hexdigest()}\n".encode()

    def import_archive(self, data: bytes) -> Tuple[str, List[str]]:
        """Load an archive; returns ``(ref, newly_stored_layer_ids)``."""
        ref, image, blobs = _read_archive(data)
        added = []
        with self.lock:
            for lid, blob in blobs:
                if lid not in self.layers:
                    self.layers[lid] = parse_diff(blob)
                    added.append(lid)
            self.tag(ref, image)
        return ref, added


def _read_archive(data: bytes):
    def corrupt(msg):
        return CorruptArchive(f"corrupt archive: {msg}")

    body, sep, trailer = data.rpartition(b"\nchecksum ")
    if not sep or trailer.strip().decode("ascii", "replace") != hashlib.sha256(body).hexdigest():
        raise corrupt("checksum mismatch")
    head, sep, payload = body.partition(b"\n\n")
    if not sep:
        raise corrupt("missing manifest terminator")
    try:
        lines = head.decode("ascii").split("\n")
        if lines[0] != ARCHIVE_MAGIC:
            raise corrupt("bad magic")
        ref = lines[1].split(" ", 1)[1]
        _, cdigest, clen = lines[2].split(" ")
        entries = [line.split(" ") for line in lines[3:]]
        offset = int(clen)
        config = payload[:offset]
        if hashlib.sha256(config).hexdigest() != cdigest:
            raise corrupt("config digest mismatch")
        blobs = []
        for kind, lid, size in entries:
            if kind != "layer":
                raise corrupt(f"unexpected entry {kind}")
            blob = payload[offset:offset + int(size)]
            offset += int(size)
            if hashlib.sha256(blob).hexdigest() != lid:
                raise corrupt(f"layer {lid[:12]} digest mismatch")
            blobs.append((lid, blob))
        if offset != len(payload):
            raise corrupt("trailing bytes")
        image = Image.from_json(json.loads(config))
    except CorruptArchive:
        raise
    except (ValueError, IndexError, KeyError, UnicodeDecodeError) as exc:
        raise corrupt(str(exc)) from None
    if list(image.layers) != [lid for lid, _ in blobs]:
        raise corrupt("manifest and config disagree on layers")
    return ref, image, blobs


class Registry:
    """A directory of archives addressed by ``name:tag``."""

    def __init__(self, root: str):
        self.root = root

    def _path(self, ref: str) -> str:
        name = normalize_ref(ref).replace("/", "%2F").replace(":", "@")
        return os.path.join(self.root, name + ".mbx")

    def push(self, store: Store, ref: str) -> str:
        os.makedirs(self.root, exist_ok=True)
        path = self._path(ref)
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(store.export_archive(ref))
        os.replace(tmp, path)
        return path

    def pull(self, store: Store, ref: str) -> List[str]:
        try:
            with open(self._path(ref), "rb") as fh:
                data = fh.read()
        except FileNotFoundError:
            raise NotFound(f"registry has no {normalize_ref(ref)}") from None
        return store.import_archive(data)[1]

    def list(self) -> List[str]:
        if not os.path.isdir(self.root):
            return []
        out = []
        for fn in sorted(os.listdir(self.root)):
            if fn.endswith(".mbx"):
                out.append(fn[:-4].replace("%2F", "/").replace("@", ":"))
        return out
