"""Runtime execution engine: turns lifecycle events into container actions.

All instance-table changes happen on one logical loop, :meth:`Orchestrator.settle`,
which drains the shared event queue in sequence order. Engine calls are
made synchronously from that loop, so by the time ``settle`` returns no
instance is left in ``Building``.
"""
from __future__ import annotations

import logging
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional

from .contexts import ContextStore
from .core import canonical_path
from .engine import ContainerEngine, image_tag
from .errors import AasError, LoopBusy, AlreadyTerminated, EngineError, MalformedSpec, UnknownContext, UnknownInstance
from .events import EXECUTION_KINDS, EventKind, EventQueue, LifecycleEvent
from .execution import (
    BUILD_FAILED,
    OPERATOR_STOP,
    SOURCE_DELETED,
    SUPERSEDED,
    Activate,
    InstanceState,
    ReactivationPolicy,
    ServiceExecutionSpec,
    Terminate,
    TerminationReason,
    TerminationTrigger,
    evaluate_execution_triggers,
    evaluate_termination_triggers,
    next_failure_count,
    parse_spec,
)
from .manager import Repository

log = logging.getLogger(__name__)

DEFAULT_GRACE_S = 5.0

LEGAL_TRANSITIONS = frozenset(
    {
        (None, InstanceState.REGISTERED),
        (InstanceState.REGISTERED, InstanceState.BUILDING),
        (InstanceState.BUILDING, InstanceState.RUNNING),
        (InstanceState.BUILDING, InstanceState.TERMINATED),
        (InstanceState.RUNNING, InstanceState.TERMINATED),
    }
)


@dataclass
class ServiceInstance:
    instance_id: str
    spec: ServiceExecutionSpec
    cause: LifecycleEvent
    created_at: int
    state: InstanceState = InstanceState.REGISTERED
    reason: Optional[TerminationReason] = None
    image_id: Optional[str] = None
    container_id: Optional[str] = None
    content_hash: Optional[str] = None
    started_at: Optional[int] = None
    terminated_at: Optional[int] = None
    consecutive_health_failures: int = 0
    last_health_poll: Optional[int] = None
    diagnostics: list[str] = field(default_factory=list)

    @property
    def active(self) -> bool:
        return self.state is not InstanceState.TERMINATED

    def to_dict(self) -> dict:
        return {
            "instanceId": self.instance_id,
            "serviceId": self.spec.service_id,
            "state": self.state.value,
            "reason": str(self.reason) if self.reason else None,
            "cause": {"kind": self.cause.kind.value, "seq": self.cause.seq},
            "imageId": self.image_id,
            "containerId": self.container_id,
            "contentHash": self.content_hash,
            "createdAt": self.created_at,
            "startedAt": self.started_at,
            "terminatedAt": self.terminated_at,
            "consecutiveHealthFailures": self.consecutive_health_failures,
            "diagnostics": list(self.diagnostics),
        }


@dataclass(frozen=True)
class Transition:
    instance_id: str
    service_id: str
    from_state: Optional[InstanceState]
    to_state: InstanceState
    reason: Optional[TerminationReason] = None
    cause_seq: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "instanceId": self.instance_id,
            "serviceId": self.service_id,
            "from": self.from_state.value if self.from_state else None,
            "to": self.to_state.value,
            "reason": str(self.reason) if self.reason else None,
            "causeSeq": self.cause_seq,
        }


class Orchestrator:
    def __init__(
        self,
        repository: Repository,
        contexts: ContextStore,
        engine: ContainerEngine,
        clock: Callable[[], int] = time.monotonic_ns,
        api_base: str = "http://127.0.0.1:8080",
        grace_s: float = DEFAULT_GRACE_S,
        trace: Optional[Callable[[str, str, str], None]] = None,
    ) -> None:
        self.repository = repository
        self.events: EventQueue = repository.events
        self.contexts = contexts
        self.engine = engine
        self.clock = clock
        self.api_base = api_base
        self.grace_s = grace_s
        self._trace = trace or (lambda component, op, detail: None)
        self.specs: dict[str, ServiceExecutionSpec] = {}
        self.instances: dict[str, ServiceInstance] = {}
        self.transitions: list[Transition] = []
        self._pending: dict[str, tuple[ServiceExecutionSpec, LifecycleEvent]] = {}
        self._images: dict[str, str] = {}
        self._counter = 0
        self._guard = threading.Condition()
        self._draining = False
        repository.on_delete(lambda sm_id: self.events.post(lambda: self.source_deleted(sm_id)))

    # -- spec registry ---------------------------------------------------------

    def register_spec(self, spec: ServiceExecutionSpec) -> None:
        """Make ``spec`` eligible for trigger evaluation (keyed by its submodel)."""
        self._trace("orchestrator", "register_spec", spec.service_id)
        self.specs[spec.submodel_id] = spec

    def spec_for_service(self, service_id: str) -> Optional[ServiceExecutionSpec]:
        for spec in self.specs.values():
            if spec.service_id == service_id:
                return spec
        return None

    def _refresh_spec(self, submodel_id: str) -> None:
        sm = self.repository.lookup(submodel_id)
        if sm is None:
            return
        try:
            spec = parse_spec(sm)
        except MalformedSpec as exc:
            log.warning("keeping previous spec for %s: %s", submodel_id, exc)
            return
        if spec is None:
            self.specs.pop(submodel_id, None)
        else:
            self.specs[submodel_id] = spec

    # -- loop ------------------------------------------------------------------

    def settle(self) -> list[Transition]:
        """Drain the event queue; reentrant calls return immediately."""
        with self._guard:
            if self._draining:
                return []
            self._draining = True
        out: list[Transition] = []
        try:
            while True:
                item = self.events.pop()
                if item is None:
                    break
                if isinstance(item, LifecycleEvent):
                    out += self.dispatch(item)
                else:
                    out += item() or []
        finally:
            with self._guard:
                self._draining = False
                self._guard.notify_all()
        if len(self.events):
            out += self.settle()
        return out

    @contextmanager
    def hold(self, timeout: float = 30.0) -> Iterator[None]:
        """Keep the loop from running while the caller mutates state that must not be observed half-done."""
        deadline = time.monotonic() + timeout
        with self._guard:
            while self._draining:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not self._guard.wait(remaining):
                    raise LoopBusy("event loop busy")
            self._draining = True
        try:
            yield
        finally:
            with self._guard:
                self._draining = False
                self._guard.notify_all()

    @property
    def quiescent(self) -> bool:
        return (
            not len(self.events)
            and not self._pending
            and not any(i.state in (InstanceState.REGISTERED, InstanceState.BUILDING) for i in self.instances.values())
        )

    def dispatch(self, event: LifecycleEvent) -> list[Transition]:
        mark = len(self.transitions)
        self._trace("orchestrator", "dispatch", f"{event.seq}:{event.kind.value}")
        if event.kind in EXECUTION_KINDS:
            subject = event.subject
            if event.kind is EventKind.IMPORT and subject is not None and subject.submodel_id not in self.specs:
                self._refresh_spec(subject.submodel_id)
            elif event.kind is EventKind.UPDATE and subject is not None and subject.submodel_id in self.specs:
                self._refresh_spec(subject.submodel_id)
            for action in evaluate_execution_triggers(event, list(self.specs.values())):
                if isinstance(action, Activate):
                    self._on_activate(action.spec, event)
        else:
            actions = evaluate_termination_triggers(event, list(self.instances.values()))
            if event.kind is EventKind.HEALTH_REPORT:
                inst = self.instances.get(event.payload["instance_id"])
                if inst is not None and inst.state is InstanceState.RUNNING:
                    inst.consecutive_health_failures = next_failure_count(
                        inst.consecutive_health_failures, bool(event.payload["healthy"])
                    )
            for action in actions:
                if isinstance(action, Terminate):
                    self._terminate(self.instances[action.instance_id], action.reason)
        return self.transitions[mark:]

    # -- activation --------------------------------------------------------------

    def active_instances(self, service_id: Optional[str] = None) -> list[ServiceInstance]:
        return [
            i for i in self.instances.values() if i.active and (service_id is None or i.spec.service_id == service_id)
        ]

    def _on_activate(self, spec: ServiceExecutionSpec, cause: LifecycleEvent) -> None:
        running = self.active_instances(spec.service_id)
        if running:
            if spec.policy is ReactivationPolicy.IGNORE_WHILE_RUNNING:
                return
            if spec.policy is ReactivationPolicy.QUEUE_ONE:
                self._pending[spec.service_id] = (spec, cause)
                return
            for inst in running:
                self._terminate(inst, SUPERSEDED)
        self.activate(spec, cause)

    def _move(self, inst: ServiceInstance, to: InstanceState, reason: Optional[TerminationReason] = None) -> None:
        frm = inst.state if inst.instance_id in self.instances else None
        if (frm, to) not in LEGAL_TRANSITIONS:
            raise AssertionError(f"illegal transition {frm} -> {to} for {inst.instance_id}")
        inst.state = to
        inst.reason = reason
        self.instances[inst.instance_id] = inst
        self.transitions.append(Transition(inst.instance_id, inst.spec.service_id, frm, to, reason, inst.cause.seq))
        log.info("instance %s (%s): %s -> %s%s", inst.instance_id, inst.spec.service_id,
                 frm.value if frm else "-", to.value, f" ({reason})" if reason else "")

    def build_env(self, spec: ServiceExecutionSpec, inst: ServiceInstance) -> dict[str, str]:
        env = {
            "AAS_API_BASE": self.api_base,
            "AAS_SERVICE_ID": spec.service_id,
            "AAS_INSTANCE_ID": inst.instance_id,
            "AAS_CAUSE_KIND": inst.cause.kind.value,
        }
        for name, ref in spec.inputs:
            env[f"AAS_INPUT_{name}"] = canonical_path(ref)
        for name, ref in spec.outputs:
            env[f"AAS_OUTPUT_{name}"] = canonical_path(ref)
        env.update(spec.env_extra)
        return env

    def _resolve_image(self, spec: ServiceExecutionSpec, inst: ServiceInstance) -> str:
        ctx = spec.context
        if ctx.is_external:
            return ctx.image
        content_hash = ctx.content_hash or self.contexts.latest(ctx.service_id).content_hash
        inst.content_hash = content_hash
        cached = self._images.get(content_hash)
        if cached is not None:
            return cached
        tree = self.contexts.retrieve(ctx.service_id, content_hash)
        self._trace("engine", "build", spec.service_id)
        image_id = self.engine.build(tree, image_tag(ctx.service_id, content_hash))
        self._images[content_hash] = image_id
        return image_id

    def activate(self, spec: ServiceExecutionSpec, cause: LifecycleEvent) -> ServiceInstance:
        """Build (or reuse) the image and start a container; never leaves ``Building`` behind."""
        self._counter += 1
        inst = ServiceInstance(f"inst-{self._counter:06d}", spec, cause, created_at=self.clock())
        self._move(inst, InstanceState.REGISTERED)
        self._move(inst, InstanceState.BUILDING)
        try:
            inst.image_id = self._resolve_image(spec, inst)
            self._trace("engine", "run", spec.service_id)
            inst.container_id = self.engine.run(
                inst.image_id,
                self.build_env(spec, inst),
                {"aasrt.instance": inst.instance_id, "aasrt.service": spec.service_id},
            )
        except (EngineError, UnknownContext, AasError) as exc:
            inst.diagnostics.append(f"{exc.code}: {exc.message}")
            inst.terminated_at = self.clock()
            self._move(inst, InstanceState.TERMINATED, BUILD_FAILED)
            self._after_termination(inst)
            return inst
        inst.started_at = self.clock()
        self._move(inst, InstanceState.RUNNING)
        return inst

    # -- termination ---------------------------------------------------------------

    def terminate(self, instance_id: str, reason: TerminationReason = OPERATOR_STOP) -> ServiceInstance:
        inst = self.instances.get(instance_id)
        if inst is None:
            raise UnknownInstance(f"no instance {instance_id}")
        if not inst.active:
            raise AlreadyTerminated(f"instance {instance_id} is already {inst.reason}")
        self._terminate(inst, reason)
        return inst

    def _terminate(self, inst: ServiceInstance, reason: TerminationReason) -> None:
        if inst.container_id is not None:
            try:
                self.engine.stop(inst.container_id, self.grace_s)
            except AasError as exc:
                inst.diagnostics.append(f"stop: {exc.code}: {exc.message}")
            try:
                self.engine.remove(inst.container_id)
            except AasError as exc:
                inst.diagnostics.append(f"remove: {exc.code}: {exc.message}")
        inst.terminated_at = self.clock()
        self._move(inst, InstanceState.TERMINATED, reason)
        self._after_termination(inst)

    def _after_termination(self, inst: ServiceInstance) -> None:
        sid = inst.spec.service_id
        if sid in self._pending and not self.active_instances(sid):
            spec, cause = self._pending.pop(sid)
            if spec.submodel_id in self.specs:
                self.activate(self.specs[spec.submodel_id], cause)

    def source_deleted(self, submodel_id: str) -> list[Transition]:
        mark = len(self.transitions)
        self.specs.pop(submodel_id, None)
        for sid in [s for s, (spec, _) in self._pending.items() if spec.submodel_id == submodel_id]:
            del self._pending[sid]
        for inst in self.active_instances():
            if inst.spec.submodel_id == submodel_id or submodel_id in inst.spec.input_submodels:
                self._pending.pop(inst.spec.service_id, None)
                self._terminate(inst, SOURCE_DELETED)
        return self.transitions[mark:]

    def reap(self) -> list[Transition]:
        """Record containers that exited on their own as ``Completed(exit_code)``."""
        mark = len(self.transitions)
        for inst in self.active_instances():
            if inst.state is not InstanceState.RUNNING or inst.container_id is None:
                continue
            try:
                status = self.engine.inspect(inst.container_id)
            except UnknownInstance:
                status = None
            except AasError as exc:
                log.warning("inspect %s failed: %s", inst.container_id, exc)
                continue
            if status is not None and status.state != "exited":
                continue
            code = status.exit_code if status is not None else None
            try:
                self.engine.remove(inst.container_id)
            except AasError as exc:
                inst.diagnostics.append(f"remove: {exc.code}: {exc.message}")
            inst.terminated_at = self.clock()
            self._move(inst, InstanceState.TERMINATED, TerminationReason.completed(code))
            self._after_termination(inst)
        return self.transitions[mark:]

    def supervision_tick(self, now: Optional[int] = None) -> list[Transition]:
        """Reap exited containers, then emit a Tick and any due health reports and process them.

        The work runs as a command on the loop, so it never races a drain
        happening on another thread.
        """
        self.events.post(lambda: self._supervise(now))
        return self.settle()

    def _supervise(self, now: Optional[int]) -> list[Transition]:
        now = self.clock() if now is None else now
        out = self.reap()
        self.events.emit(EventKind.TICK, None, {"now": now})
        for inst in self.active_instances():
            health = inst.spec.health
            if inst.state is not InstanceState.RUNNING or health is None:
                continue
            last = inst.last_health_poll if inst.last_health_poll is not None else inst.started_at
            if now - last < health.interval_ns:
                continue
            inst.last_health_poll = now
            healthy = self._poll_health(inst)
            if healthy is not None:
                self.events.emit(
                    EventKind.HEALTH_REPORT,
                    None,
                    {"instance_id": inst.instance_id, "healthy": healthy},
                )
        return out

    def _poll_health(self, inst: ServiceInstance) -> Optional[bool]:
        try:
            healthy = self.engine.health(inst.container_id)
            if healthy is None:
                healthy = self.engine.inspect(inst.container_id).state == "running"
            return healthy
        except AasError as exc:
            if TerminationTrigger.ON_HEALTH_CHECK_FAIL in inst.spec.termination_triggers:
                inst.diagnostics.append(f"health poll: {exc.code}: {exc.message}")
                return False
            log.warning("health poll of %s failed: %s", inst.instance_id, exc)
            return None

    def shutdown(self) -> list[Transition]:
        """Stop every active instance with ``OperatorStop``."""
        self.events.post(self._stop_all)
        return self.settle()

    def _stop_all(self) -> list[Transition]:
        mark = len(self.transitions)
        self._pending.clear()
        for inst in self.active_instances():
            self._terminate(inst, OPERATOR_STOP)
        return self.transitions[mark:]


def legal_history(transitions: Iterable[Transition]) -> bool:
    """True when every instance's transitions form a path in the legal relation."""
    current: dict[str, Optional[InstanceState]] = {}
    for t in transitions:
        frm = current.get(t.instance_id)
        if frm != t.from_state or (frm, t.to_state) not in LEGAL_TRANSITIONS:
            return False
        current[t.instance_id] = t.to_state
    return True
