"""Lifecycle owner of shells and submodels.

Every state change is persisted through a :mod:`storage` backend and
announced on the shared :class:`~aasrt.events.EventQueue`, which the
orchestrator consumes. Writes to one submodel are serialized by a
per-submodel lock; the event for a write is emitted while that lock is
held, so per-submodel event order matches version order.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, replace
from typing import Callable, Optional

from . import codec
from .core import (
    AssetAdministrationShell,
    ElementReference,
    Property,
    Scalar,
    Submodel,
    SubmodelElement,
    find_element,
    insert_element,
    parse_value,
    replace_element,
    values_equal,
)
from .errors import DuplicateId, InvalidElement, TypeMismatch, UnknownShell, UnknownSubmodel
from .events import EventKind, EventQueue, LifecycleEvent
from .storage import MemoryBackend, StorageBackend

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Summary:
    id: str
    id_short: str
    version: Optional[int] = None
    semantic_id: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "idShort": self.id_short}
        if self.version is not None:
            d["version"] = self.version
        if self.semantic_id is not None:
            d["semanticId"] = self.semantic_id
        return d


class Repository:
    def __init__(self, events: Optional[EventQueue] = None, backend: Optional[StorageBackend] = None) -> None:
        self.events = events if events is not None else EventQueue()
        self.backend = backend if backend is not None else MemoryBackend()
        self._shells: dict[str, AssetAdministrationShell] = {}
        self._submodels: dict[str, Submodel] = {}
        self._lock = threading.RLock()
        self._sm_locks: dict[str, threading.RLock] = {}
        self._delete_listeners: list[Callable[[str], None]] = []
        for doc in self.backend.load("shells"):
            shell = codec.shell_from_dict(doc)
            self._shells[shell.id] = shell
        for doc in self.backend.load("submodels"):
            sm = codec.submodel_from_dict(doc)
            self._submodels[sm.id] = sm

    def on_delete(self, listener: Callable[[str], None]) -> None:
        """Register ``listener(submodel_id)``, called after a submodel is deleted."""
        self._delete_listeners.append(listener)

    def _sm_lock(self, submodel_id: str) -> threading.RLock:
        with self._lock:
            return self._sm_locks.setdefault(submodel_id, threading.RLock())

    # -- submodels -------------------------------------------------------------

    def create_submodel(self, sm: Submodel) -> str:
        sm = replace(sm, version=1)
        with self._sm_lock(sm.id):
            with self._lock:
                if sm.id in self._submodels or sm.id in self._shells:
                    raise DuplicateId([sm.id])
                self.backend.put("submodels", sm.id, codec.submodel_to_dict(sm))
                self._submodels[sm.id] = sm
            self.events.emit(EventKind.IMPORT, sm.ref, {"submodel": codec.submodel_to_dict(sm)})
        return sm.id

    def lookup(self, submodel_id: str) -> Optional[Submodel]:
        """Side-effect free read used for internal reference resolution."""
        with self._lock:
            return self._submodels.get(submodel_id)

    def get_submodel(self, submodel_id: str, record_access: bool = False) -> Submodel:
        sm = self.lookup(submodel_id)
        if sm is None:
            raise UnknownSubmodel(submodel_id)
        if record_access:
            self.events.emit(EventKind.ACCESS, sm.ref)
        return sm

    def get_element(self, ref: ElementReference, record_access: bool = False):
        sm = self.get_submodel(ref.submodel_id)
        node = find_element(sm, ref.element_path)
        if record_access:
            self.events.emit(EventKind.ACCESS, ElementReference(ref.submodel_id, ref.element_path))
        return node

    def update_element(self, ref: ElementReference, new_value: Scalar) -> int:
        """Replace a Property value; returns the submodel version afterwards.

        Writing the value a Property already holds changes nothing and emits
        no event.
        """
        with self._sm_lock(ref.submodel_id):
            sm = self.get_submodel(ref.submodel_id)
            node = find_element(sm, ref.element_path)
            if not isinstance(node, Property):
                raise TypeMismatch(f"{'.'.join(ref.element_path) or ref.submodel_id} is not a Property")
            value = parse_value(node.value_type, new_value)
            if values_equal(value, node.value):
                return sm.version
            new_sm = replace(
                replace_element(sm, ref.element_path, replace(node, value=value)), version=sm.version + 1
            )
            self._commit(new_sm)
            self.events.emit(
                EventKind.UPDATE,
                ElementReference(ref.submodel_id, ref.element_path),
                {"change": "value", "old": node.value, "new": value, "version": new_sm.version},
            )
            return new_sm.version

    def add_element(self, submodel_id: str, parent_path: tuple[str, ...], element: SubmodelElement) -> int:
        with self._sm_lock(submodel_id):
            sm = self.get_submodel(submodel_id)
            try:
                new_sm = insert_element(sm, tuple(parent_path), element)
            except (ValueError, TypeError) as exc:
                raise InvalidElement(str(exc)) from None
            new_sm = replace(new_sm, version=sm.version + 1)
            self._commit(new_sm)
            self.events.emit(
                EventKind.UPDATE,
                ElementReference(submodel_id, tuple(parent_path) + (element.id_short,)),
                {"change": "structure", "op": "add", "element": codec.element_to_dict(element), "version": new_sm.version},
            )
            return new_sm.version

    def remove_element(self, ref: ElementReference) -> int:
        if not ref.element_path:
            raise InvalidElement("use delete_submodel to remove a whole submodel")
        with self._sm_lock(ref.submodel_id):
            sm = self.get_submodel(ref.submodel_id)
            new_sm = replace(replace_element(sm, ref.element_path, None), version=sm.version + 1)
            self._commit(new_sm)
            self.events.emit(
                EventKind.UPDATE,
                ElementReference(ref.submodel_id, ref.element_path),
                {"change": "structure", "op": "remove", "version": new_sm.version},
            )
            return new_sm.version

    def _commit(self, sm: Submodel) -> None:
        with self._lock:
            self.backend.put("submodels", sm.id, codec.submodel_to_dict(sm))
            self._submodels[sm.id] = sm

    def delete_submodel(self, submodel_id: str) -> None:
        with self._sm_lock(submodel_id):
            with self._lock:
                if submodel_id not in self._submodels:
                    raise UnknownSubmodel(submodel_id)
                self.backend.delete("submodels", submodel_id)
                del self._submodels[submodel_id]
        for listener in self._delete_listeners:
            listener(submodel_id)

    def discard_submodel(self, submodel_id: str) -> None:
        """Remove without notifying anyone; only for rolling back a failed import."""
        with self._lock:
            if self._submodels.pop(submodel_id, None) is not None:
                self.backend.delete("submodels", submodel_id)

    def list_submodels(self) -> list[Summary]:
        with self._lock:
            sms = sorted(self._submodels.values(), key=lambda s: s.id)
        return [Summary(s.id, s.id_short, s.version, s.semantic_id) for s in sms]

    # -- shells ----------------------------------------------------------------

    def create_shell(self, shell: AssetAdministrationShell) -> str:
        with self._lock:
            if shell.id in self._shells or shell.id in self._submodels:
                raise DuplicateId([shell.id])
            self.backend.put("shells", shell.id, codec.shell_to_dict(shell))
            self._shells[shell.id] = shell
        return shell.id

    def get_shell(self, shell_id: str) -> AssetAdministrationShell:
        with self._lock:
            shell = self._shells.get(shell_id)
        if shell is None:
            raise UnknownShell(shell_id)
        return shell

    def delete_shell(self, shell_id: str) -> None:
        with self._lock:
            if shell_id not in self._shells:
                raise UnknownShell(shell_id)
            self.backend.delete("shells", shell_id)
            del self._shells[shell_id]

    def discard_shell(self, shell_id: str) -> None:
        with self._lock:
            if self._shells.pop(shell_id, None) is not None:
                self.backend.delete("shells", shell_id)

    def dangling_refs(self, shell_id: str) -> list[ElementReference]:
        """Submodel references of the shell that do not resolve to a stored submodel."""
        shell = self.get_shell(shell_id)
        with self._lock:
            return [r for r in shell.submodel_refs if r.submodel_id not in self._submodels]

    def list_shells(self) -> list[Summary]:
        with self._lock:
            shells = sorted(self._shells.values(), key=lambda s: s.id)
        return [Summary(s.id, s.id_short) for s in shells]

    def contains(self, identifier: str) -> bool:
        with self._lock:
            return identifier in self._submodels or identifier in self._shells

    def state(self) -> dict:
        """Structural snapshot of all shells and submodels (events excluded)."""
        with self._lock:
            return {
                "shells": {k: codec.shell_to_dict(v) for k, v in sorted(self._shells.items())},
                "submodels": {k: codec.submodel_to_dict(v) for k, v in sorted(self._submodels.items())},
            }


def replay(events: list[LifecycleEvent]) -> Repository:
    """Rebuild a repository from Import and Update events alone."""
    repo = Repository()
    for ev in events:
        if ev.kind is EventKind.IMPORT:
            repo.create_submodel(codec.submodel_from_dict(ev.payload["submodel"]))
        elif ev.kind is EventKind.UPDATE:
            change = ev.payload.get("change")
            if change == "value":
                repo.update_element(ev.subject, ev.payload["new"])
            elif ev.payload.get("op") == "add":
                repo.add_element(ev.subject.submodel_id, ev.subject.element_path[:-1], codec.element_from_dict(ev.payload["element"]))
            elif ev.payload.get("op") == "remove":
                repo.remove_element(ev.subject)
    return repo

