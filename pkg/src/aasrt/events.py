from __future__ import annotations

import itertools
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from .core import ElementReference


class EventKind(str, Enum):
    IMPORT = "Import"
    UPDATE = "Update"
    ACCESS = "Access"
    DEMAND = "Demand"
    TICK = "Tick"
    HEALTH_REPORT = "HealthReport"


EXECUTION_KINDS = frozenset({EventKind.IMPORT, EventKind.UPDATE, EventKind.ACCESS, EventKind.DEMAND})
SUPERVISION_KINDS = frozenset({EventKind.TICK, EventKind.HEALTH_REPORT})


@dataclass(frozen=True)
class LifecycleEvent:
    """One typed event. ``seq`` totally orders events within a runtime.

    Payload keys by kind: Update ``change`` ("value"|"structure"), ``old``,
    ``new``; Demand ``service_id``; Tick ``now`` (ns); HealthReport
    ``instance_id``, ``healthy``.
    """

    kind: EventKind
    subject: Optional[ElementReference]
    seq: int
    payload: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        from .core import canonical_path

        return {
            "seq": self.seq,
            "kind": self.kind.value,
            "subject": canonical_path(self.subject) if self.subject is not None else None,
            "payload": self.payload,
        }


class EventQueue:
    """Single ordered queue feeding the orchestrator's loop.

    Sequence numbers are assigned under the same lock that appends, so queue
    order equals ``seq`` order no matter how many threads emit. Besides
    events the queue carries plain callables ("commands") that must run on
    the loop, e.g. supervision ticks or cascades from deletes.
    """

    def __init__(self) -> None:
        self._seq = itertools.count(1)
        self._items: deque = deque()
        self._lock = threading.Lock()
        self.history: list[LifecycleEvent] = []

    def emit(self, kind: EventKind, subject: Optional[ElementReference], payload: Optional[dict] = None) -> LifecycleEvent:
        with self._lock:
            event = LifecycleEvent(EventKind(kind), subject, next(self._seq), dict(payload or {}))
            self._items.append(event)
            self.history.append(event)
            return event

    def post(self, command: Callable[[], Any]) -> None:
        with self._lock:
            self._items.append(command)

    def pop(self):
        with self._lock:
            return self._items.popleft() if self._items else None

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def retract(self, predicate: Callable[[LifecycleEvent], bool]) -> int:
        """Remove matching events from both the queue and the history (import rollback)."""
        with self._lock:
            before = len(self.history)
            self._items = deque(
                x for x in self._items if not (isinstance(x, LifecycleEvent) and predicate(x))
            )
            self.history = [e for e in self.history if not predicate(e)]
            return before - len(self.history)
