"""Persistence backends for the repository.

A backend stores opaque JSON documents keyed by (kind, id). The directory
backend writes one file per document::

    <root>/shells/<urlencoded id>.json
    <root>/submodels/<urlencoded id>.json
"""
from __future__ import annotations

import copy
import json
import os
import tempfile
import threading
from pathlib import Path
from typing import Iterator, Protocol
from urllib.parse import quote, unquote

from . import codec
from .errors import StorageFailure

KINDS = ("shells", "submodels")


class StorageBackend(Protocol):
    def put(self, kind: str, key: str, doc: dict) -> None: ...

    def delete(self, kind: str, key: str) -> None: ...

    def load(self, kind: str) -> Iterator[dict]: ...


class MemoryBackend:
    """Keeps documents in a dict; used by tests and the simulated runtime.

    Callers hand over freshly built documents, so they are stored as-is and
    only copied on :meth:`load`.
    """

    def __init__(self) -> None:
        self.data: dict[tuple[str, str], dict] = {}
        self._lock = threading.Lock()

    def put(self, kind: str, key: str, doc: dict) -> None:
        with self._lock:
            self.data[(kind, key)] = doc

    def delete(self, kind: str, key: str) -> None:
        with self._lock:
            self.data.pop((kind, key), None)

    def load(self, kind: str) -> Iterator[dict]:
        with self._lock:
            items = sorted((k, v) for k, v in self.data.items() if k[0] == kind)
        for _, doc in items:
            yield copy.deepcopy(doc)


def encode_key(key: str) -> str:
    return quote(key, safe="")


class JsonDirectoryBackend:
    def __init__(self, root: os.PathLike | str) -> None:
        self.root = Path(root)
        try:
            for kind in KINDS:
                (self.root / kind).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageFailure(f"cannot create store at {self.root}: {exc}") from None

    def _path(self, kind: str, key: str) -> Path:
        return self.root / kind / f"{encode_key(key)}.json"

    def put(self, kind: str, key: str, doc: dict) -> None:
        target = self._path(kind, key)
        try:
            fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-", suffix=".json")
            with os.fdopen(fd, "wb") as fh:
                fh.write(codec.dumps(doc))
            os.replace(tmp, target)
        except OSError as exc:
            raise StorageFailure(f"cannot write {target}: {exc}") from None

    def delete(self, kind: str, key: str) -> None:
        try:
            self._path(kind, key).unlink(missing_ok=True)
        except OSError as exc:
            raise StorageFailure(f"cannot delete {key!r}: {exc}") from None

    def load(self, kind: str) -> Iterator[dict]:
        for path in sorted((self.root / kind).glob("*.json")):
            if path.name.startswith(".tmp-"):
                continue
            with open(path, "rb") as fh:
                doc = json.load(fh)
            if doc.get("id") != unquote(path.stem):
                raise StorageFailure(f"{path} holds id {doc.get('id')!r}")
            yield doc
