"""Content-addressed store for service build contexts.

On disk::

    <root>/<service_id>/<content_hash>/meta.json
    <root>/<service_id>/<content_hash>/tree/Containerfile
    <root>/<service_id>/<content_hash>/tree/...

A version directory is written under a temporary name and renamed into
place, so readers never see a half-written tree. Versions are never
rewritten; :meth:`ContextStore.gc` is the only removal path.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

from .aasx import CONTAINERFILE, ServiceContextEntry, context_digest
from .errors import StorageFailure, UnknownContext


@dataclass(frozen=True)
class StoredContext:
    service_id: str
    declared_version: str
    content_hash: str
    stored_at: float
    ordinal: int

    def to_dict(self) -> dict:
        return {
            "serviceId": self.service_id,
            "declaredVersion": self.declared_version,
            "contentHash": self.content_hash,
            "storedAt": self.stored_at,
            "ordinal": self.ordinal,
        }


class ContextStore:
    """Keeps every distinct (service_id, content_hash) tree ever stored.

    With ``root=None`` trees are held in memory only.
    """

    def __init__(self, root: Optional[os.PathLike | str] = None, clock: Callable[[], float] = time.time) -> None:
        self.root = Path(root) if root is not None else None
        self._clock = clock
        self._meta: dict[tuple[str, str], StoredContext] = {}
        self._trees: dict[tuple[str, str], dict[str, bytes]] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        self._ordinal = 0
        if self.root is not None:
            try:
                self.root.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise StorageFailure(f"cannot create context store {self.root}: {exc}") from None
            self._load()

    def _load(self) -> None:
        for meta_path in sorted(self.root.glob("*/*/meta.json")):
            meta = json.loads(meta_path.read_text("utf-8"))
            ctx = StoredContext(
                meta["serviceId"], meta["declaredVersion"], meta["contentHash"], meta["storedAt"], meta["ordinal"]
            )
            self._meta[(ctx.service_id, ctx.content_hash)] = ctx
            self._ordinal = max(self._ordinal, ctx.ordinal)

    def _lock_for(self, service_id: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(service_id, threading.Lock())

    def store(self, entry: ServiceContextEntry) -> str:
        """Persist ``entry``; storing an identical context again is a no-op."""
        key = (entry.service_id, entry.content_hash)
        with self._lock_for(entry.service_id):
            if key in self._meta:
                return entry.content_hash
            with self._guard:
                self._ordinal += 1
                ordinal = self._ordinal
            ctx = StoredContext(entry.service_id, entry.declared_version, entry.content_hash, self._clock(), ordinal)
            tree = entry.tree()
            if self.root is None:
                self._trees[key] = dict(tree)
            else:
                self._write(ctx, tree)
            self._meta[key] = ctx
        return entry.content_hash

    def _write(self, ctx: StoredContext, tree: dict[str, bytes]) -> None:
        service_dir = self.root / ctx.service_id
        final = service_dir / ctx.content_hash
        try:
            service_dir.mkdir(exist_ok=True)
            tmp = Path(tempfile.mkdtemp(dir=service_dir, prefix=".tmp-"))
            for rel, data in tree.items():
                target = tmp / "tree" / rel
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(data)
            (tmp / "meta.json").write_text(json.dumps(ctx.to_dict(), indent=2, sort_keys=True) + "\n", "utf-8")
            os.rename(tmp, final)
        except OSError as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            raise StorageFailure(f"cannot store context {ctx.service_id}/{ctx.content_hash}: {exc}") from None

    def retrieve(self, service_id: str, content_hash: str) -> dict[str, bytes]:
        key = (service_id, content_hash)
        if key not in self._meta:
            raise UnknownContext(f"no context {service_id!r} with hash {content_hash}")
        if self.root is None:
            return dict(self._trees[key])
        base = self.root / service_id / content_hash / "tree"
        tree = {p.relative_to(base).as_posix(): p.read_bytes() for p in sorted(base.rglob("*")) if p.is_file()}
        if CONTAINERFILE not in tree or context_digest(tree[CONTAINERFILE], ((k, v) for k, v in tree.items() if k != CONTAINERFILE)) != content_hash:
            raise StorageFailure(f"stored context {service_id}/{content_hash} is corrupt")
        return tree

    def get(self, service_id: str, content_hash: str) -> StoredContext:
        try:
            return self._meta[(service_id, content_hash)]
        except KeyError:
            raise UnknownContext(f"no context {service_id!r} with hash {content_hash}") from None

    def list_versions(self, service_id: str) -> list[StoredContext]:
        """All stored versions of ``service_id``, newest first."""
        versions = [c for (sid, _), c in self._meta.items() if sid == service_id]
        return sorted(versions, key=lambda c: c.ordinal, reverse=True)

    def latest(self, service_id: str) -> StoredContext:
        versions = self.list_versions(service_id)
        if not versions:
            raise UnknownContext(f"no context stored for service {service_id!r}")
        return versions[0]

    def all(self) -> list[StoredContext]:
        return sorted(self._meta.values(), key=lambda c: c.ordinal)

    def discard(self, service_id: str, content_hash: str) -> None:
        """Drop a version; used to roll back a failed import and by :meth:`gc`."""
        key = (service_id, content_hash)
        with self._lock_for(service_id):
            if self._meta.pop(key, None) is None:
                return
            self._trees.pop(key, None)
            if self.root is not None:
                shutil.rmtree(self.root / service_id / content_hash, ignore_errors=True)
                try:
                    (self.root / service_id).rmdir()
                except OSError:
                    pass

    def gc(self, keep: Iterable[tuple[str, str]]) -> list[StoredContext]:
        """Remove every version not in ``keep``; returns what was removed."""
        keep = set(keep)
        removed = [c for key, c in list(self._meta.items()) if key not in keep]
        for c in removed:
            self.discard(c.service_id, c.content_hash)
        return removed
